"""Write a parameter-free identity-generator checkpoint for pipeline debugging.

    python scripts/make_identity_checkpoint.py runs/identity.safetensors
    flash2ambient eval --checkpoint runs/identity.safetensors --manifest data/manifest.tsv --label Flash

Evaluating it scores the raw flash image against the ambient target.
"""

import argparse

from flash2ambient.networks import GeneratorSpec, ModelBundle, build_generator, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("output")
    args = ap.parse_args()
    spec = GeneratorSpec(arch="identity")
    save_checkpoint(ModelBundle(build_generator(spec), spec, training_meta={"epoch": 0, "step": 0}), args.output)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
