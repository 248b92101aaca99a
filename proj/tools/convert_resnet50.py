"""Convert torchvision ResNet-50 weights into a .dhsw encoder file.

    python3 tools/convert_resnet50.py --output encoder.dhsw [--state-dict resnet50.pth]

Without --state-dict the ImageNet weights are fetched through torchvision.
`--random` writes a randomly initialized network instead (for testing).
Pass the result to `dhseg train --weights`.
"""

import argparse
import struct
import sys

import numpy as np

# Normalization epsilon used by the C++ network; torchvision uses 1e-5.
TARGET_EPS = 1e-3
SOURCE_EPS = 1e-5
BLOCKS = [3, 4, 6, 3]


def write_dhsw(path, tensors):
    with open(path, "wb") as f:
        f.write(b"DHSW")
        f.write(struct.pack("<II", 1, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_dhsw(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"DHSW":
        raise ValueError(f"{path}: not a weight container")
    version, count = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    return out


def conv_bn(sd, conv, bn, prefix, out):
    out[f"{prefix}/kernel"] = sd[f"{conv}.weight"]
    var = sd[f"{bn}.running_var"]
    # Same inference-time scale under the other epsilon.
    out[f"{prefix}/norm/gamma"] = sd[f"{bn}.weight"] * np.sqrt(var + TARGET_EPS) / np.sqrt(var + SOURCE_EPS)
    out[f"{prefix}/norm/beta"] = sd[f"{bn}.bias"]
    out[f"{prefix}/norm/moving_mean"] = sd[f"{bn}.running_mean"]
    out[f"{prefix}/norm/moving_variance"] = var


def convert(sd):
    sd = {k: v.detach().cpu().numpy().astype(np.float64) for k, v in sd.items() if v.dtype.is_floating_point}
    out = {}
    conv_bn(sd, "conv1", "bn1", "conv1", out)
    for stage, count in enumerate(BLOCKS):
        for i in range(count):
            src = f"layer{stage + 1}.{i}"
            dst = f"block{stage + 2}_{i + 1}"
            for j, part in enumerate(["conv_a", "conv_b", "conv_c"], start=1):
                conv_bn(sd, f"{src}.conv{j}", f"{src}.bn{j}", f"{dst}/{part}", out)
            if f"{src}.downsample.0.weight" in sd:
                conv_bn(sd, f"{src}.downsample.0", f"{src}.downsample.1", f"{dst}/shortcut", out)
    return {k: v.astype(np.float32) for k, v in out.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--output", required=True)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--state-dict", help="torch state dict (.pth) of a torchvision resnet50")
    src.add_argument("--random", action="store_true", help="random initialization, no download")
    args = ap.parse_args(argv)

    import torch
    import torchvision

    if args.state_dict:
        sd = torch.load(args.state_dict, map_location="cpu")
    elif args.random:
        torch.manual_seed(0)
        model = torchvision.models.resnet50(weights=None)
        # Non-trivial statistics so the epsilon fold is exercised.
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.5, 0.5)
                m.running_var.uniform_(0.5, 2.0)
        sd = model.state_dict()
    else:
        sd = torchvision.models.resnet50(weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1).state_dict()
    tensors = convert(sd)
    write_dhsw(args.output, tensors)
    print(f"wrote {len(tensors)} tensors to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
