"""Guidance masks, the eta ramp and what one edit does to an attention row.

Run:  python demos/02_layout_masks.py
"""
import numpy as np
import torch

from toycompose.guidance import GuidanceSchedule, Layout, edit_logits, eta, rasterize_masks

layout = Layout((16, 16), [("dog", (0.0, 0.0, 0.6, 0.6)), ("cat", (0.5, 0.4, 1.0, 1.0))])
print(layout.to_json())

for res in [(8, 8), (16, 16)]:
    dog, cat = rasterize_masks(layout, ["dog", "cat"], res)
    print(f"\ndog mask at {res}:  + show, - other subject's box, . zero")
    sym = np.where(dog > 0, "+", np.where(dog < 0, "-", "."))
    print("\n".join(" ".join(r) for r in sym))
    print("cells (+, -, 0):", (dog > 0).sum(), (dog < 0).sum(), (dog == 0).sum())

# the overlap is show for both subjects
dog, cat = rasterize_masks(layout, ["dog", "cat"], (16, 16))
print("\noverlap cells positive in both:", int(((dog > 0) & (cat > 0)).sum()))

sched = GuidanceSchedule("sqrt", 1.0, 50)
print("\neta over the 50 sampling steps (t counts down from 50):")
print(np.round([eta(t, sched) for t in range(50, -1, -10)], 3))
for form in ["sqrt", "sine", "linear"]:
    s = GuidanceSchedule(form, 1.0, 50)
    print(f"  {form:6s} eta(25) = {eta(25, s):.3f}")

# one image cell, two tokens, subject on token 0
logits = torch.zeros(1, 2, dtype=torch.float64)
w = torch.softmax(edit_logits(logits, [np.array([[2.5]])], [[0]], 1.0), -1)
print("\nweights after a +2.5 edit:", w.numpy().round(3))

# the default weakening value is tiny: it barely moves anything
w = torch.softmax(edit_logits(logits, [np.array([[-1e-5]])], [[0]], 1.0), -1)
print("weights after a -1e-5 edit:", w.numpy().round(8))
