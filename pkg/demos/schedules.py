"""How the curricula and the learning rate line up over a desk-scale run.

Restarts happen every 8 epochs at desk scale, and every course moves in
step with them, so each new block starts with a fresh learning-rate peak
and a larger slice of data or augmentation.
"""

from cldino.curriculum import course_value, preset
from cldino.schedule import LrConfig, sgdr_lr

BLOCK, EPOCHS = 8, 40
lr = LrConfig(restart_period=BLOCK)
courses = {name: preset(name, BLOCK) for name in ("CL_D1", "CL_D2", "CL_D3", "CL_A1", "CL_A2")}

print("epoch  lr        " + "  ".join(f"{n:>5}" for n in courses))
for epoch in range(0, EPOCHS, 4):
    row = "  ".join(f"{course_value(c, epoch):5.2f}" for c in courses.values())
    print(f"{epoch:5d}  {sgdr_lr(epoch, 0.0, lr):.6f}  {row}")

# within a block the rate follows a half cosine, updated every batch
print("\nlearning rate through the first block, 4 batches per epoch:")
print(" ".join(f"{sgdr_lr(e, b / 4, lr) * 1e3:.3f}" for e in range(BLOCK) for b in range(4)))
