"""Print a short table of whatever experiment outputs exist under results/."""
import json
import sys
from pathlib import Path

root = Path(sys.argv[1] if len(sys.argv) > 1 else "results")

for path in sorted(root.rglob("aggregate.json")):
    agg = json.loads(path.read_text())
    print(f"{path.parent.relative_to(root)!s:40} median={agg['median_return']:10.3f} "
          f"success={agg['success_rate']:.2f}")

summary = root / "demo-restarts" / "summary.json"
if summary.exists():
    data = json.loads(summary.read_text())
    for arm, info in data["arms"].items():
        finals = " ".join(f"{r:8.1f}" for r in info["final_returns"])
        print(f"{arm:20} median={info['median_final_return']:8.1f}  finals: {finals}")
