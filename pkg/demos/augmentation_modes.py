# How the three augmentation modes draw transforms for one batch,
# and why per-sample draws reduce to constant ones when the streams collapse.
import numpy as np

from mmbatch.augment import AugmentPolicy, RngStream, augment_batch

rng = np.random.default_rng(0)
images = [rng.random((3, 40, 40)).astype(np.float32) for _ in range(4)]
streams = [RngStream(seed=0, epoch=0, batch=0, sample=s) for s in range(4)]
batch_stream = RngStream(seed=0, epoch=0, batch=0)
policy = AugmentPolicy(resize=36, crop=32)

for mode in ("none", "constant", "per_sample"):
    out, params = augment_batch(images, policy.with_mode(mode), streams, batch_stream)
    print(mode, out.shape)
    for p in params:
        print("   angle %+6.2f  top %d  left %d  hflip %d  vflip %d" % (p.angle, p.top, p.left, p.hflip, p.vflip))

# every sample reads the batch stream -> same parameters as constant mode
_, collapsed = augment_batch(images, policy, [batch_stream] * 4, batch_stream)
_, constant = augment_batch(images, policy.with_mode("constant"), streams, batch_stream)
print("collapsed == constant:", collapsed == constant)
