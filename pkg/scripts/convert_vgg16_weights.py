"""Convert torchvision's ImageNet VGG-16 convolutions into an encoder weights archive.

    python scripts/convert_vgg16_weights.py --output weights/vgg16.safetensors

Needs torchvision and a cached or downloadable ``VGG16_Weights.IMAGENET1K_V1``.
``--state-dict`` converts a local ``vgg16-*.pth`` file instead.
"""

import argparse

import torch

from flash2ambient.networks import load_vgg16_archive, save_vgg16_archive, vgg16_conv_names


def torchvision_state_dict():
    from torchvision.models import VGG16_Weights, vgg16

    return vgg16(weights=VGG16_Weights.IMAGENET1K_V1).state_dict()


def convert(state_dict):
    # torchvision keeps the 13 convs in order inside ``features``; ReLU/pool slots hold no weights
    keys = [k[: -len(".weight")] for k in state_dict if k.startswith("features.") and k.endswith(".weight")]
    keys.sort(key=lambda k: int(k.split(".")[1]))
    names = vgg16_conv_names()
    if len(keys) != len(names):
        raise SystemExit(f"expected {len(names)} convolutions, found {len(keys)}")
    out = {}
    for name, key in zip(names, keys):
        out[f"{name}.weight"] = state_dict[f"{key}.weight"].numpy().transpose(2, 3, 1, 0)
        out[f"{name}.bias"] = state_dict[f"{key}.bias"].numpy()
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--output", required=True)
    ap.add_argument("--state-dict", help="local torchvision VGG-16 .pth file")
    args = ap.parse_args()
    sd = torch.load(args.state_dict, map_location="cpu") if args.state_dict else torchvision_state_dict()
    save_vgg16_archive(convert(sd), args.output)
    load_vgg16_archive(args.output)  # validates names and shapes
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
