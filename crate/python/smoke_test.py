"""Smoke test for the lcae_net extension module.

Build the module first (see README), then run:

    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import lcae_net


def main():
    params = lcae_net.LcaParams(alpha=1.0, beta=0.5, d=1)
    assert (params.alpha, params.beta, params.d) == (1.0, 0.5, 1)

    flat = [[7.0] * 12 for _ in range(12)]
    weights = lcae_net.attention(flat, params)
    assert all(abs(w - 0.5) < 1e-12 for row in weights[1:-1] for w in row[1:-1])

    impulse = [[0.0] * 11 for _ in range(11)]
    impulse[5][5] = 1.0
    assert abs(lcae_net.attention(impulse)[5][5] - 1 / (1 + math.exp(-2))) < 1e-12
    assert len(lcae_net.contrast_maps(impulse)) == 4

    image, mask = lcae_net.synth_scene(seed=3, size=32, targets=1)
    fast = lcae_net.attention(lcae_net.standardize(image), params)
    slow = lcae_net.attention_oracle(lcae_net.standardize(image), params)
    assert max(abs(a - b) for ra, rb in zip(fast, slow) for a, b in zip(ra, rb)) < 1e-9
    assert len(lcae_net.components(mask)) == 1

    report = lcae_net.evaluate([mask], [mask])
    assert report["iou"] == 1.0 and report["pd"] == 1.0 and report["fa"] == 0.0

    try:
        lcae_net.LcaParams(alpha=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative alpha accepted")

    model = lcae_net.Model(base_channels=4, input_size=32, seed=0)
    probs = model.probabilities(image)
    assert len(probs) == 32 and all(0.0 < p < 1.0 for row in probs for p in row)
    pred = model.predict(image, threshold=0.5)
    assert all(v in (0, 1) for row in pred for v in row)
    assert model.flops() > 0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.ckpt")
        model.save(path)
        again = lcae_net.Model.load(path)
        assert again.num_params == model.num_params
        assert again.probabilities(image) == probs

    print(f"ok: {model!r}")


if __name__ == "__main__":
    main()
