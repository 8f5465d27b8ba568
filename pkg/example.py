from src.pyfairattr.cli import run_cli
from src.pyfairattr.exceptions import FairAttrError
from src.pyfairattr.synthetic import write_square_dataset

import logging
import sys
from pathlib import Path

from dotenv import load_dotenv


def run() -> int:
    root = Path("demo_data")
    manifest = write_square_dataset(root, {"train": 400, "val": 100, "test": 200}, size=64)

    common = [
        "--backbone", "toy",
        "--input_size", "64",
        "--expert_spans", "3,4,5",
        "--descriptor_length", "32",
        "--learning_rate", "0.01",
        "--batch_size", "16",
        "--epochs", "5",
        "--mean", "0.5,0.5,0.5",
        "--std", "0.25,0.25,0.25",
    ]

    try:
        steps = [
            ["train", "--manifest", str(manifest), "--output_dir", "demo_runs/train", *common],
            [
                "evaluate",
                "--checkpoint", "demo_runs/train/checkpoint.pt",
                "--manifest", str(manifest),
                "--protected", "tint",
                "--output", "demo_runs/eval/predictions.csv",
            ],
            [
                "metrics",
                "--predictions", "demo_runs/eval/predictions.csv",
                "--protected", "tint",
                "--output", "demo_runs/eval/report.json",
            ],
            [
                "visualize",
                "--checkpoint", "demo_runs/train/checkpoint.pt",
                "--image", str(root / "test_00000.png"),
                "--output", "demo_runs/heatmaps",
            ],
        ]
        for argv in steps:
            code = run_cli(argv)
            if code:
                return code
    except FairAttrError as err:
        print(err)
        return 1

    print(Path("demo_runs/eval/report.json").read_text())
    return 0


if __name__ == "__main__":
    load_dotenv()
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    sys.exit(run())
