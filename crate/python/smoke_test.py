"""Smoke test for the stridesense_py extension.

Build and install first, e.g. `pip install --no-build-isolation ./crates/py`
(needs maturin), or copy target/release/libstridesense_py.so next to this
file as stridesense_py.so.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import stridesense_py as ss


def main():
    assert ss.n_frames(30 * 16000) == 2997
    assert ss.n_frames(100) == 0

    tone = [0.3 * math.sin(2 * math.pi * 2000 * n / 16000) for n in range(16000)]
    frames = ss.log_mel(tone)
    assert len(frames) == ss.n_frames(16000) and len(frames[0]) == 64
    peak = max(range(64), key=lambda m: frames[50][m])
    assert 30 < peak < 50, peak

    assert abs(ss.ccc([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) - 1.0) < 1e-6
    assert ss.mae([10.0, 10.0], [6.0, 20.0]) == 7.0
    try:
        ss.mae([], [])
    except ValueError:
        pass
    else:
        raise AssertionError("empty mae accepted")

    with tempfile.TemporaryDirectory() as tmp:
        corpus = os.path.join(tmp, "corpus")
        runners, sessions, events = ss.synth_corpus(corpus, runners=2, sessions=(1, 1), duration_s=120.0, interval_s=(30.0, 40.0), seed=3)
        assert (runners, sessions) == (2, 2) and events > 0
        wavs = sorted(os.listdir(os.path.join(corpus, "audio")))
        samples, rate = ss.read_wav(os.path.join(corpus, "audio", wavs[0]))
        assert rate == 16000 and len(samples) == 120 * 16000

        model = ss.Model(width_scale=0.125, seed=1)
        assert model.embedding_dim == 256
        maps = [ss.log_mel(samples[i * 16000 : (i + 2) * 16000]) for i in range(3)]
        preds = model.predict(maps)
        assert len(preds) == 3 and all(math.isfinite(p) for p in preds)

        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        again = ss.Model.load(path)
        assert again.predict(maps) == preds
        assert again.replace_head(5).param_count == model.param_count

        code = ss.run_cli(["split", "--segments", "missing.csv", "--out", "x.csv", "--ratios", "0.5,0.5,0.5"])
        assert code == 2, code

    print("python smoke test ok")


if __name__ == "__main__":
    main()
