"""Parameter counts per mode and the Elastic-MoT training speedup for the large preset.

    python scripts/accounting.py [--text-len 256 --image-len 1024]
"""

import argparse

from unimask.backbone import LARGE_CONFIG, TaskMode, elastic_speedup, flop_estimate, param_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--text-len", type=int, default=256)
    ap.add_argument("--image-len", type=int, default=1024)
    args = ap.parse_args()

    rep = param_report(LARGE_CONFIG)
    print("mode,loaded_params,forward_tflops")
    for mode in TaskMode:
        image = 0 if mode is TaskMode.UND_ONLY else args.image_len
        flops = flop_estimate(LARGE_CONFIG, args.text_len, image, mode)
        print(f"{mode.value},{rep.loaded[mode.value]},{flops / 1e12:.3f}")
    print(f"# training speedup vs. full-copy MoT: {elastic_speedup(LARGE_CONFIG, args.text_len, args.image_len):.3f}")


if __name__ == "__main__":
    main()
