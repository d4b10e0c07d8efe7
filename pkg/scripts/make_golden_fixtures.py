"""Regenerate the frozen golden fixtures under tests/fixtures.

Run once and commit the outputs; the tests compare current forwards against
these frozen files, so regenerating after an intentional numeric change is a
deliberate act.
"""

from pathlib import Path

import numpy as np

from glottisnet import blocks as B
from glottisnet import tensor as T
from glottisnet.tensor import Tensor

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(4242)
    att = B.ChannelAttention(rng, 8)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 6, 6)).astype(np.float32))
    T.dump_tensor(x, FIXTURES / "attention_in.gnt")
    T.dump_tensor(att(x), FIXTURES / "attention_out.gnt")

    rng = np.random.default_rng(4343)
    sppf = B.SPPF(rng, 8, 8)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 8, 8, 8)).astype(np.float32))
    T.dump_tensor(x, FIXTURES / "sppf_in.gnt")
    T.dump_tensor(sppf(x), FIXTURES / "sppf_out.gnt")

    try:
        from glottisnet import network as N

        cfg = N.ModelConfig(base_channels=8, num_classes=4, mask_protos=4, neck_channels=16)
        model = N.build_model(cfg, seed=999)
        img = Tensor(np.random.default_rng(3).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
        T.dump_tensor(img, FIXTURES / "model_in.gnt")
        preds = N.forward(model, img)
        T.dump_tensor(preds.cls_logits[0], FIXTURES / "model_cls_p3.gnt")
        T.dump_tensor(preds.box_offsets[2], FIXTURES / "model_box_p5.gnt")
        T.dump_tensor(preds.prototypes, FIXTURES / "model_protos.gnt")
    except ImportError:
        print("network module not present yet; skipped model fixtures")

    print(f"fixtures written to {FIXTURES}")


if __name__ == "__main__":
    main()
