"""Smoke test for the Python extension.

Build and install it first:

    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/mentorloop-*.whl
"""

import json
import math
import tempfile

import mentorloop as ml


def main() -> None:
    cfg = json.loads(ml.default_config(["dataset.counts.train_original=8"]))
    assert cfg["dataset"]["counts"]["train_original"] == 8
    for split in ("eval_original", "pool_new", "eval_new"):
        cfg["dataset"]["counts"][split] = 4
    text = json.dumps(cfg)
    assert len(ml.config_hash(text)) == 16

    with tempfile.TemporaryDirectory() as d:
        manifest = json.loads(ml.generate_dataset(d, text))
        assert manifest["config_hash"] == ml.config_hash(text)
        first = manifest["splits"]["pool_new"][0]
        pixels, h, w, label = ml.load_sample(d, first)
        assert len(pixels) == h * w
        assert json.loads(label) is not None

    shape = (2, 2, 1)
    loss, grad = ml.masked_loss(shape, [0.2, 0.7, 0.5, 0.9], [0, 1, 0, 1], [True, False, False, False])
    assert math.isclose(loss, -math.log(0.8), rel_tol=1e-12)
    assert grad[1:] == [0.0, 0.0, 0.0]
    empty, zero = ml.masked_loss(shape, [0.2, 0.7, 0.5, 0.9], [0, 1, 0, 1], [False] * 4)
    assert empty == 0.0 and not any(zero)

    assert ml.average_precision([(0.9, False), (0.8, True)], 1) == 0.5
    assert ml.precision_recall(0, 0, 3) == (1.0, 0.0)

    for row in json.loads(ml.unit_acceptance()):
        print(f"criterion {row['id']:>2} {'PASS' if row['passed'] else 'FAIL'} {row['title']}")
        assert row["passed"], row["detail"]

    print("python smoke test passed")


if __name__ == "__main__":
    main()
