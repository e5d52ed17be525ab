import numpy as np
import pytest

from toycompose.text import BACKGROUNDS, COLORS, SHAPES, TEXTURES
from toycompose.toyworld import (
    EvalReport,
    OcclusionError,
    ShapeSpec,
    box_cells,
    detect_subjects,
    evaluate_run,
    grid_iou,
    make_scene_dataset,
    make_subject_dataset,
    oracle_detect,
    random_box,
    render_scene,
)

LEFT = (0.05, 0.25, 0.45, 0.75)
RIGHT = (0.55, 0.25, 0.95, 0.75)


def test_appearance_space_size():
    assert (len(SHAPES), len(COLORS), len(TEXTURES)) == (4, 6, 3)


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("texture", TEXTURES)
def test_renderer_oracle_closure(shape, texture):
    rng = np.random.default_rng(hash((shape, texture)) % 2**32)
    for color in COLORS:
        for _ in range(3):
            box = random_box(rng, 0.5)
            spec = ShapeSpec(shape, color, texture)
            det = oracle_detect(render_scene([(spec, box)], seed=int(rng.integers(1000))), box, spec)
            assert det.present, (spec, box)
            assert det.confused_with is None, (spec, box, det)
            assert det.iou >= 0.9, (spec, box, det.iou)


def test_detection_is_background_invariant():
    spec = ShapeSpec("triangle", "yellow", "dotted")
    box = (0.2, 0.1, 0.8, 0.7)
    dets = [oracle_detect(render_scene([(spec, box)], seed=3, background=bg), box, spec) for bg in BACKGROUNDS]
    assert all(d.present and d.confused_with is None for d in dets)
    assert len({round(d.iou, 12) for d in dets}) == 1


def test_pure_background_is_empty():
    for bg in BACKGROUNDS:
        img = render_scene([], seed=1, background=bg)
        assert not oracle_detect(img, LEFT, ShapeSpec("circle", "red")).present
        assert not oracle_detect(img, None, ShapeSpec("square", "blue")).present


def test_confusion_reports_rendered_appearance():
    rendered = ShapeSpec("circle", "green", "striped")
    img = render_scene([(rendered, LEFT)], seed=0)
    for color in COLORS:
        for texture in TEXTURES:
            asked = ShapeSpec("circle", color, texture)
            det = oracle_detect(img, LEFT, asked)
            assert det.present
            if asked.appearance == rendered.appearance:
                assert det.confused_with is None
            else:
                assert det.confused_with == rendered.appearance
    # a different category is not a detection at all
    assert not oracle_detect(img, LEFT, ShapeSpec("square", "green", "striped")).present


def test_render_is_deterministic_and_in_range():
    scene = [(ShapeSpec("circle", "red"), LEFT), (ShapeSpec("square", "cyan", "dotted"), RIGHT)]
    a, b = render_scene(scene, seed=5), render_scene(scene, seed=5)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 16, 16) and a.dtype == np.float32
    assert a.min() >= -1 and a.max() <= 1
    assert render_scene(scene, seed=6).tobytes() != a.tobytes()


def test_render_errors():
    with pytest.raises(ValueError):
        render_scene([(ShapeSpec("circle", "red"), (0.5, 0.0, 1.2, 0.5))])
    with pytest.raises(OcclusionError):
        render_scene([(ShapeSpec("circle", "red"), (0, 0, 0.6, 0.6)), (ShapeSpec("square", "blue"), (0.1, 0.1, 0.7, 0.7))])
    with pytest.raises(ValueError):
        ShapeSpec("hexagon", "red")


def test_box_cells_and_grid_iou():
    cells = box_cells((0, 0, 0.5, 0.5), 16, 16)
    assert cells.sum() == 64 and cells[:8, :8].all()
    assert grid_iou((0, 0, 0.5, 0.5), (0, 0, 0.5, 0.5), 16, 16) == 1.0
    assert grid_iou((0, 0, 0.5, 0.5), (0.5, 0.5, 1, 1), 16, 16) == 0.0
    assert grid_iou((0, 0, 0.5, 1), (0, 0, 1, 1), 8, 8) == 0.5


def test_subject_dataset():
    spec = ShapeSpec("circle", "green")
    ds = make_subject_dataset(spec, n=3, seed=0)
    assert ds.images.shape == (3, 3, 16, 16)
    assert ds.caption == "a photo of circle"
    assert ds.base_category == "circle"
    again = make_subject_dataset(spec, n=3, seed=0)
    assert ds.images.tobytes() == again.images.tobytes()
    assert len({tuple(b) for b in ds.boxes}) == 3
    for img, box in zip(ds.images, ds.boxes):
        det = oracle_detect(img, box, spec)
        assert det.present and det.confused_with is None
    for n in (2, 6):
        with pytest.raises(ValueError):
            make_subject_dataset(spec, n=n)


def test_scene_dataset_captions_are_faithful(vocab):
    ds = make_scene_dataset(40, seed=1)
    assert ds.images.shape == (40, 3, 16, 16)
    for caption, layout in zip(ds.captions, ds.layouts):
        words = caption.split()
        assert all(w in vocab for w in words)
        for spec, _ in layout:
            assert spec.base_category in words


# -- evaluation --------------------------------------------------------------


A = ShapeSpec("circle", "red")
B = ShapeSpec("square", "blue", "striped")
SUBJECTS = [("A", A, LEFT), ("B", B, RIGHT)]


def _batch():
    return [
        render_scene([(A, LEFT), (B, RIGHT)], seed=0),  # both right
        render_scene([(A, LEFT)], seed=1),  # B missing
        render_scene([(ShapeSpec("circle", "green"), LEFT), (B, RIGHT)], seed=2),  # A confused
        render_scene([], seed=3),  # nothing
        render_scene([(A, LEFT), (B, RIGHT)], seed=4, background="grass"),  # both right
        render_scene([(A, LEFT), (ShapeSpec("square", "red", "dotted"), RIGHT)], seed=5),  # B confused
    ]


def test_evaluate_run_hand_counted():
    rep = evaluate_run(_batch(), SUBJECTS)
    assert rep.n_images == 6
    assert rep.presence_rate == {"A": 5 / 6, "B": 4 / 6}
    assert rep.all_present_rate == 4 / 6
    assert rep.confusion_rate == 2 / 9
    assert rep.per_subject_confusion == {"A": 1 / 5, "B": 1 / 4}
    assert len(rep.iou["A"]) == 5 and len(rep.iou["B"]) == 4
    assert all(v >= 0.9 for v in rep.iou["A"] + rep.iou["B"])


def test_evaluate_run_brute_force_recount():
    imgs = _batch()
    rep = evaluate_run(imgs, SUBJECTS)
    dets = [detect_subjects(img, [(s, b) for _, s, b in SUBJECTS]) for img in imgs]
    for k, (name, _, _) in enumerate(SUBJECTS):
        assert rep.presence_rate[name] == sum(d[k].present for d in dets) / len(imgs)
    present = [d for row in dets for d in row if d.present]
    assert rep.confusion_rate == sum(d.confused_with is not None for d in present) / len(present)


def test_evaluate_perfect_and_swapped():
    perfect = [render_scene([(A, LEFT), (B, RIGHT)], seed=s) for s in range(4)]
    rep = evaluate_run(perfect, SUBJECTS)
    assert rep.mean_presence == 1.0 and rep.confusion_rate == 0.0
    swapped_a, swapped_b = ShapeSpec("circle", "blue", "striped"), ShapeSpec("square", "red")
    swapped = [render_scene([(swapped_a, LEFT), (swapped_b, RIGHT)], seed=s) for s in range(4)]
    rep = evaluate_run(swapped, SUBJECTS)
    assert rep.mean_presence == 1.0 and rep.confusion_rate == 1.0
    with pytest.raises(ValueError):
        evaluate_run([], SUBJECTS)


def test_joint_detection_uses_each_blob_once():
    a2 = ShapeSpec("circle", "blue")
    img = render_scene([(A, LEFT)], seed=0)
    dets = detect_subjects(img, [(A, None), (a2, None)])
    assert [d.present for d in dets] == [True, False]
    assert dets[0].confused_with is None


def test_report_json_round_trip():
    rep = evaluate_run(_batch(), SUBJECTS, metadata={"seeds": [0, 1], "config": "abc"})
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert back.median_iou("A") == rep.median_iou("A")
    assert back.median_iou("nobody") == 0.0
