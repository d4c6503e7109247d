"""Smoke test for the semg2v Python bindings.

Build the extension first:

    cargo build --release -p semg2v-py

then run `python3 python/smoke_test.py`. The script copies the built
shared library into a temporary directory as an importable module.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsemg2v_py.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "semg2v_py.so")
            sys.path.insert(0, str(tmp))
            import semg2v_py

            return semg2v_py
    sys.exit("build the extension first: cargo build --release -p semg2v-py")


def main():
    s = load_module()

    assert s.cer("abc", "abc") == 0.0
    assert s.cer("a", "abc") == 2.0
    assert abs(s.noam_lr(4000, 4000, 384) - 384 ** -0.5 * 4000 ** -0.5) < 1e-15

    u = s.synthetic_utterance(0)
    print(f"utterance {u['id']}: {' '.join(u['syllables'])}")

    silent = s.emg_features(s.condition(u["silent"]), "silent")
    vocal = s.emg_features(s.condition(u["vocal"]), "vocal")
    mel = s.mel_spectrogram(u["audio"])
    assert len(silent[0]) == s.FEATURE_DIM == 355
    assert len(mel[0]) == 80
    assert abs(len(vocal) - len(mel)) <= 1

    path, cost = s.dtw_basic(silent, vocal)
    durations = s.path_to_durations(path, len(silent), len(vocal))
    assert sum(durations) == len(vocal)
    print(f"dtw cost {cost:.2f}, {len(silent)} silent frames -> {len(vocal)} vocal frames")

    assert s.mcd(u["audio"], u["audio"]) == 0.0
    assert abs(s.stoi(u["audio"], u["audio"]) - 1.0) < 1e-6

    model = s.Model.reduced(num_classes=8)
    out = model.infer(silent)
    assert len(out["mel"]) == sum(out["durations"])
    audio = s.griffin_lim(out["mel"], iters=4)
    assert all(math.isfinite(x) for x in audio)

    try:
        s.emg_features(u["silent"], "whispered")
    except ValueError as e:
        print(f"rejected bad mode: {e}")
    else:
        raise AssertionError("bad mode accepted")

    with tempfile.TemporaryDirectory() as work:
        p = s.Pipeline(
            overrides=[
                f"workdir={work}",
                "synth_utterances=10",
                "d_model=8",
                "hidden_units=32",
                "heads=2",
                "enc_layers=1",
                "dec_layers=1",
                "postnet_channels=8",
                "durpred_channels=8",
                "epochs=1",
                "batch_size=4",
                "vocoder_iters=2",
            ]
        )
        stages = p.run("all")
        assert [name for name, _, _ in stages][-1] == "evaluate"
        again = p.run("all")
        assert all(skipped for _, skipped, _ in again)
        print("pipeline:", ", ".join(name for name, _, _ in stages))

    print("smoke test passed")


if __name__ == "__main__":
    main()
