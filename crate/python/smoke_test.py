"""Smoke test for the apnlab_py extension module.

Build and run:
    cargo build --release -p apnlab-py --features extension-module
    cp target/release/libapnlab_py.so python/apnlab_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import apnlab_py as ap


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    for k in (1, 4, 16, 64):
        loss = ap.info_nce(ap.Tensor([0.0] * 4, [4]), ap.Tensor([0.0] * 4, [4]), ap.Tensor([0.0] * 4 * k, [k, 4]))
        assert close(loss.item(), math.log(1 + k)), (k, loss.item())

    uniform = ap.nce_amdim(ap.Tensor([0.0] * 3, [3]), ap.Tensor([0.0] * 6, [2, 3]), ap.Tensor([0.0] * 15, [5, 3]))
    assert close(uniform.item(), math.log(5 / 2))

    e = ap.Tensor([1.0, 0.0, 0.0, 1.0], [2, 2])
    assert close(ap.nt_xent(e, e, 1.0).item(), -math.log(math.e / (math.e + 2)), 1e-6)

    a = ap.Tensor([0.3, -0.2, 0.5], [3], requires_grad=True)
    pos = ap.Tensor([0.1, 0.4, -0.3], [3])
    neg = ap.Tensor([0.2, 0.1, 0.0, -0.5, 0.3, 0.7], [2, 3])
    ap.info_nce(a, pos, neg).backward()
    assert a.grad is not None and len(a.grad) == 3

    assert ap.patch_count(256, 256, 64, 32) == 49

    data = ap.make_synthetic(64, 2, 3, 32, 32, 0.7, 0)
    assert len(data) == 64 and data.shape == (3, 32, 32)
    assert sorted(set(data.labels)) == [0, 1]

    for name in ("amdim", "cpc", "simclr", "yadim"):
        cfg = ap.RunConfig.preset(name)
        assert ap.RunConfig.parse(cfg.to_text()).to_text() == cfg.to_text()

    cfg = ap.RunConfig.preset("yadim")
    cfg.epochs = 1
    cfg.data_n = 64
    cfg.probe_epochs = 5
    data = cfg.dataset()
    with tempfile.TemporaryDirectory() as out:
        losses, ckpt = ap.pretrain(cfg, data, out)
        assert len(losses) == 1 and math.isfinite(losses[0])
        acc = ap.probe(cfg, data, ckpt)
        assert 0.0 <= acc <= 1.0
    print(f"smoke test ok: loss {losses[0]:.4f}, probe accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
