"""Converts a randomly initialized torchvision ResNet-50 and checks that it
covers exactly the encoder tensors of a freshly initialized model, with
matching shapes and an inference scale preserved under the epsilon change."""

import pathlib
import subprocess
import sys
import tempfile

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "tools"))
import convert_resnet50 as conv  # noqa: E402


def main():
    cli = sys.argv[1]
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        subprocess.run([cli, "init-weights", "--task", "page", "--output", str(tmp / "init.dhsw")], check=True)
        conv.main(["--random", "--output", str(tmp / "enc.dhsw")])
        full = conv.read_dhsw(tmp / "init.dhsw")
        enc = conv.read_dhsw(tmp / "enc.dhsw")

    encoder_names = {n for n in full if n.startswith("conv1/") or n.startswith("block")}
    failures = []
    if set(enc) != encoder_names:
        failures.append(f"missing {sorted(encoder_names - set(enc))[:5]}, extra {sorted(set(enc) - encoder_names)[:5]}")
    for name in sorted(encoder_names & set(enc)):
        if full[name].shape != enc[name].shape:
            failures.append(f"{name}: {enc[name].shape} vs {full[name].shape}")

    import torch
    import torchvision

    torch.manual_seed(0)
    model = torchvision.models.resnet50(weights=None)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.5, 0.5)
            m.running_var.uniform_(0.5, 2.0)
    bn = model.layer3[2].bn2
    want = (bn.weight / torch.sqrt(bn.running_var + bn.eps)).detach().numpy()
    got = enc["block4_3/conv_b/norm/gamma"] / np.sqrt(enc["block4_3/conv_b/norm/moving_variance"] + conv.TARGET_EPS)
    if not np.allclose(got, want, rtol=1e-5):
        failures.append("normalization scale not preserved")

    for f in failures:
        print("FAIL", f)
    print(f"{len(enc)} encoder tensors checked" if not failures else "conversion check failed")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
