# A short walk through the tape-based autodiff and the two optimizers.
import numpy as np

from mmbatch.optim import Adam, SGDMomentum, StepLR, lr_at_epoch
from mmbatch.tensor import Tape, Tensor, conv2d, matmul, relu, softmax_cross_entropy, tensor_sum

# forward pass under a tape, then backward from a scalar
x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
w = Tensor(np.ones((3, 2)), requires_grad=True)
with Tape() as tape:
    loss = tensor_sum(relu(matmul(x, w)))
tape.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# a 3x3 convolution on a tiny image
img = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
ker = Tensor(np.ones((1, 1, 3, 3)))
print("conv sums\n", conv2d(img, ker).data[0, 0])

# cross-entropy of uniform logits is log(C)
print("uniform CE", softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item(), np.log(4))

# fit w to minimize (w - 3)^2 with both optimizers
for opt_cls, kw in ((SGDMomentum, dict(lr=0.05, momentum=0.9)), (Adam, dict(lr=0.3))):
    p = Tensor([0.0], requires_grad=True)
    opt = opt_cls([p], **kw)
    for _ in range(60):
        p.grad = 2 * (p.data - 3.0)
        opt.step()
    print(opt_cls.__name__, "ends at", round(float(p.data[0]), 4))

sched = StepLR(5e-4, step_size=7, gamma=0.1)
print("rates", [lr_at_epoch(sched, e) for e in (0, 6, 7, 14)])
