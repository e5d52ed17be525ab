"""The toy world: procedural shapes and the oracle that scores them.

Run:  python demos/01_toy_world.py
"""
import numpy as np

from toycompose.toyworld import (
    PALETTE, ShapeSpec, evaluate_run, find_components, make_subject_dataset, oracle_detect, render_scene,
)


def show(img):
    # one letter per pixel: first letter of the nearest palette color, '.' for background
    names = list(PALETTE)
    ref = np.array(list(PALETTE.values()))
    px = img.reshape(3, -1).T
    d = ((px[:, None] - ref[None]) ** 2).sum(-1)
    letters = np.array([n[0] for n in names])[d.argmin(1)]
    letters[d.min(1) > 0.5] = "."
    for row in letters.reshape(img.shape[1:]):
        print(" ".join(row))
    print()


left = (0.05, 0.25, 0.45, 0.75)
right = (0.55, 0.25, 0.95, 0.75)
green = ShapeSpec("circle", "green")
blue = ShapeSpec("square", "blue", "striped")

img = render_scene([(green, left), (blue, right)], seed=0, background="grass")
show(img)

for c in find_components(img):
    print(c.category, c.color, c.texture, "box", np.round(c.box, 2))

det = oracle_detect(img, left, green)
print("\ngreen circle present:", det.present, "iou %.2f" % det.iou)

# asking for a red circle where a green one was drawn: present, but confused
det = oracle_detect(img, left, ShapeSpec("circle", "red"))
print("red circle present:", det.present, "confused with", det.confused_with)

# few-shot references for one subject
ds = make_subject_dataset(green, n=4, seed=0)
print("\nsubject dataset:", ds.images.shape, repr(ds.caption))
show(ds.images[1])

rep = evaluate_run(list(ds.images), [("green", green, None)])
print("presence", rep.presence_rate, "confusion", rep.confusion_rate)
