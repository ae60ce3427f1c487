from __future__ import annotations

import argparse
from pathlib import Path

from nodulefpr.acceptance import run_acceptance
from nodulefpr.config import configure_logging, get_settings, load_pipeline_config
from nodulefpr.errors import NoduleFprError

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    parser = argparse.ArgumentParser(description="End-to-end phantom acceptance run for regimes s, a and ae.")
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "phantom.ini")
    parser.add_argument("--out", type=Path, default=Path("runs") / "acceptance")
    args = parser.parse_args()

    settings = get_settings()
    configure_logging(settings.log_level)
    try:
        report = run_acceptance(load_pipeline_config(args.config), args.out, settings)
    except NoduleFprError as exc:
        print(f"Phantom acceptance aborted: {exc}")
        return exc.exit_code

    for regime, value in report.cpm.items():
        print(f"cpm[{regime}]\t{value:.4f}")
    print(f"ae_loss_drop\t{report.ae_loss_drop:.3f}")
    print(f"seconds\t{report.seconds:.0f}\t(workers {report.workers})")

    failures = report.failures()
    if failures:
        print("Phantom acceptance failed:")
        for failure in failures:
            print(f"- {failure}")
        return 1

    print("Phantom acceptance passed.")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
