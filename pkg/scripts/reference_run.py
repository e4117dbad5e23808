"""Regenerate the reference record behind tests/calibration.json.

Runs the committed smoke and end-to-end protocol recipes (tests/protocol.py)
and prints the measured metrics and timings. Takes ~30 min on a small CPU.

    python scripts/reference_run.py
"""

import json
import os
import sys
import time
import warnings

warnings.filterwarnings("ignore")
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

import protocol  # noqa: E402

t0 = time.time()


def note(msg):
    print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)


note("smoke: single-utterance overfit run")
history, _ckpt, smoke_seconds = protocol.run_smoke(
    progress=lambda r: note(f"  step {r['step']} recon {r['recon']:.3f}")
)
smoke = {
    "seconds_for_2000_steps": round(smoke_seconds, 1),
    "initial_recon": round(history[0]["recon"], 3),
    "final_recon_mean_last_25": round(sum(r["recon"] for r in history[-25:]) / 25.0, 4),
    "recon_ratio": round(protocol.smoke_recon_ratio(history), 5),
}
note(f"smoke: {smoke}")

built, features = protocol.build_protocol_features(progress=note)
out = protocol.run_protocol(features, progress=note)
total = time.time() - t0

record = {
    "protocol_budgets": protocol.PROTOCOL,
    "protocol_reference": {
        "total_seconds": round(total - smoke_seconds, 1),
        "recon_autoregressive_semi_supervised": out["report_semi"].recon_autoregressive,
        "recon_autoregressive_supervised": out["report_supervised"].recon_autoregressive,
        "ar_error_ratio": out["report_semi"].recon_autoregressive
        / out["report_supervised"].recon_autoregressive,
        "probe_acc_acoustic_target_val": out["report_semi"].probe_acc_acoustic,
        "probe_acc_linguistic_target_val": out["report_semi"].probe_acc_linguistic,
        "transposition_ratio_target_val": out["report_semi"].transposition_ratio,
        "transposition_ratio_multi_val": out["report_pretrained"].transposition_ratio,
    },
    "smoke_reference": smoke,
}
print(json.dumps(record, indent=2))
