"""Smoke test for the installed cavlex extension.

    pip install --no-build-isolation ./crates/python
    python python/smoke_test.py
"""

import json
import os
import tempfile

import cavlex


def main():
    print("cavlex", cavlex.__version__)

    phi = cavlex.shapley_exact([0.0, 1.0, 2.0, 4.0])
    assert abs(phi[0] - 1.5) < 1e-12 and abs(phi[1] - 2.5) < 1e-12, phi
    values, stderr = cavlex.shapley_mc([0.0, 1.0, 2.0, 4.0], samples=256, seed=3)
    assert abs(sum(values) - 4.0) < 1e-9, values
    assert len(stderr) == 2

    assert cavlex.receptive_field([(3, 1, 1), (3, 2, 1)], (8, 8), 1, 1) == (0, 0, 4, 4)
    assert cavlex.dedup([[1.0, 0.0], [-1.0, 0.02], [0.0, 1.0]]) == [0, 2]

    with tempfile.TemporaryDirectory() as tmp:
        manifest = cavlex.write_planted_bundle(os.path.join(tmp, "bundle"), n=400, directions=3, seed=1)
        bundle = cavlex.load_bundle(manifest)
        print(bundle)
        assert bundle.num_classes == 8

        config = {
            "bundle": "bundle/manifest.json",
            "discovery": {"m": 4, "beta": 0.1, "lambda1": 1.0, "lambda2": 1.0, "epochs": 15,
                          "batch_size": 32, "learning_rate": 0.05, "seed": 1},
            "count": 30,
        }
        path = os.path.join(tmp, "config.json")
        with open(path, "w") as f:
            json.dump(config, f)
        report = cavlex.run(path)
        assert os.path.isfile(os.path.join(tmp, "out", "report.json"))
        for concept in report["concepts"]:
            best = concept["results"][0]["ranking"]
            print("CAV", concept["index"], best["common"]["text"], [t["text"] for t in best["topk"]])
        print("completeness", round(report["completeness"], 4))

        try:
            cavlex.run(os.path.join(tmp, "missing.json"))
        except ValueError as e:
            print("missing config rejected:", e)
        else:
            raise AssertionError("missing config accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
