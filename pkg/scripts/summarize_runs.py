"""Print one line per run directory: convergence, iterations and final FRC metrics."""

import json
import sys
from pathlib import Path

root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs")
for summary in sorted(root.glob("*/summary.json")):
    s = json.loads(summary.read_text())
    final = s.get("final") or {}
    frc = (s.get("frc") or [{}])[0]
    print(f"{summary.parent.name:28s} converged={s['converged']!s:5s} it={s['iterations']:4d} "
          f"s/it={s['seconds_per_iteration']:.2f} Im(gamma)={final.get('gamma_im', float('nan')):+.3e} "
          f"rho_max={frc.get('rho_max', float('nan')):.4g} n_sn={frc.get('n_sn', '-')} b={frc.get('b', 0.0):.3g}")
