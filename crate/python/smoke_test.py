"""Smoke test for the ezvc_py extension module.

Build first with `cargo build -p ezvc-python` (or `--release`), then run
`python3 python/smoke_test.py`. The script copies the built shared object
into a temporary directory under the module's import name and loads it.
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libezvc_py.so")
        if os.path.exists(lib):
            break
    else:
        sys.exit("libezvc_py.so not found; run `cargo build -p ezvc-python` first")
    tmp = tempfile.mkdtemp(prefix="ezvc_py_")
    shutil.copy(lib, os.path.join(tmp, "ezvc_py.so"))
    sys.path.insert(0, tmp)
    return importlib.import_module("ezvc_py"), tmp


def main():
    ezvc, tmp = load_module()
    print("ezvc_py", ezvc.__version__)

    corpus = ezvc.desk_corpus()
    assert len(corpus) == 10
    uid, speaker, samples = corpus[0]
    mel = ezvc.log_mel(samples, ezvc.SAMPLE_RATE)
    expected = len(samples) // 160
    assert mel.n_mels == 80 and mel.n_frames == expected, mel

    mel_path = os.path.join(tmp, "a.mel")
    mel.save(mel_path)
    assert ezvc.mel_l1(mel, ezvc.MelSpectrogram.load(mel_path)) == 0.0

    emb = ezvc.surrogate_embed(samples, ezvc.SAMPLE_RATE, seed=0)
    assert abs(len(emb) - len(samples) / 16000 * 50) <= 1 and len(emb[0]) == 400

    points = [[0.0], [1.0], [10.0], [11.0]]
    cb = ezvc.Codebook.train(points, k=2, seed=3)
    centers = sorted(cb.centroid(i)[0] for i in range(2))
    assert centers == [0.5, 10.5] and abs(cb.inertia - 0.25) < 1e-9, (centers, cb.inertia)
    assert cb.assign([[0.2], [10.9]])[0] != cb.assign([[0.2], [10.9]])[1]

    assert ezvc.dedup([3, 3, 1, 1, 1, 3]) == [3, 1, 3]
    assert ezvc.to_tokens([1, 1, 2], 4, 5) == [1, 2, 4, 4, 4]
    assert ezvc.unit_overlap([1, 2, 3, 4], [1, 3, 4]) == 0.75

    t = ezvc.sway_schedule(32, -1.0)
    assert abs(t[0]) < 1e-12 and abs(t[-1] - 1.0) < 1e-12
    assert all(b > a for a, b in zip(t, t[1:]))

    a = ezvc.proxy_speaker_embedding(samples, ezvc.SAMPLE_RATE)
    assert len(a) == 160 and abs(math.sqrt(sum(x * x for x in a)) - 1.0) < 1e-5
    assert abs(ezvc.cosine_similarity(a, a) - 1.0) < 1e-6

    try:
        ezvc.Decoder.load(os.path.join(tmp, "missing.ckpt"))
    except FileNotFoundError as e:
        assert "artifact-missing" in str(e)
    else:
        raise AssertionError("missing checkpoint accepted")

    # an untrained model still runs the whole conversion recipe
    feats = [f for _, _, s in corpus[:2] for f in ezvc.surrogate_embed(s, ezvc.SAMPLE_RATE, seed=0)]
    cb = ezvc.Codebook.train(feats, k=8, seed=1)
    model = ezvc.Decoder.desk(8, seed=0)
    assert model.num_parameters > 1_000_000
    src, tgt = corpus[0][2], corpus[2][2]
    out = model.convert(src, tgt, ezvc.SAMPLE_RATE, cb, seed=5, steps=2, gl_iters=2)
    assert out["generated_mel"].n_frames == len(src) // 160
    assert out["prompt_frames"] == len(tgt) // 160
    assert abs(len(out["audio"]) / len(src) - 1.0) < 0.05

    try:
        model.convert(src[:4000], tgt, ezvc.SAMPLE_RATE, cb, seed=5, steps=2)
    except ValueError as e:
        assert "domain" in str(e)
    else:
        raise AssertionError("short source accepted")

    shutil.rmtree(tmp, ignore_errors=True)
    print("smoke test passed")


if __name__ == "__main__":
    main()
