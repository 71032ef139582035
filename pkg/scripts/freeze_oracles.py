"""Regenerate tests/data/frozen_oracles.json from the reference implementations.

Run from the repository root; the output is committed and the test suite
compares the package against it.
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import oracles  # noqa: E402

REFERENCE = dict(n=32, l=48, b=2, h=3, p=3, x=3, r=2)


def main():
    frozen = {
        "conv_valid": oracles.conv1d_naive([[[1, 2, 3, 4]]], [[[1, 1]]]),
        "conv_causal_dilated": oracles.conv1d_naive([[[1, 2, 3, 4]]], [[[1, 1]]], dilation=2, padding="causal"),
        "transposed": oracles.transposed_conv1d_naive([[[1, 2]]], [[1, 1]], 1),
        "interp_hand": oracles.interp_naive([0, 2], [0, 2], [0, 1, 2]),
        "interp_third_hz": oracles.interp_naive([0, 3, 6, 9], [0, 3, 6, 3], list(range(10))),
        "params_reference_c5": oracles.param_table(**REFERENCE, c=5),
        "params_reference_c5_glu": oracles.param_table(**REFERENCE, c=5, glu=True),
        "rf_frames_reference": oracles.dilated_stack_reach(3, 3, 2),
        "rf_frames_toy": oracles.dilated_stack_reach(3, 2, 1),
        "frames_t96": oracles.frames_for(96, 48, 24),
        "wmse_hand": oracles.wmse_naive([[[1, 2], [3, 4]]], [[[1, 1], [3, 3]]]),
        "est_acc_hand": oracles.est_acc_naive([[2]], [[1]]),
        "sae_hand": oracles.sae_naive([[110]], [[100]])[0][0],
    }
    frozen["params_reference_c5_total"] = sum(frozen["params_reference_c5"].values())
    frozen["params_reference_c5_glu_total"] = sum(frozen["params_reference_c5_glu"].values())
    out = ROOT / "tests" / "data" / "frozen_oracles.json"
    out.write_text(json.dumps(frozen, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
