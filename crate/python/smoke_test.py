"""Quick end-to-end check of the Python bindings on a miniature run.

Build the extension first, e.g. `maturin develop -m crates/python/Cargo.toml`,
or copy `target/release/libstealthpatch.so` next to this file as
`stealthpatch.so`.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import stealthpatch as sp  # noqa: E402


def main():
    cfg = sp.Config()
    for key, value in {
        "epochs": "2",
        "patch_size": "8",
        "palette_size": "4",
        "detector.epochs": "2",
        "data.detector_scenes": "16",
        "data.train_scenes": "8",
        "data.eval_scenes": "6",
    }.items():
        cfg.set(key, value)
    assert cfg.get("patch_size") == "8"
    assert "beta" in sp.Config.keys()

    lab = sp.srgb_to_lab((255, 255, 255))
    assert abs(lab[0] - 100.0) < 1e-4, lab
    assert list(sp.lab_to_srgb(lab)) == [255, 255, 255]

    det_scenes, train, held_out = sp.synthesize_datasets(cfg)
    assert len(det_scenes) == 16 and len(train) == 8 and len(held_out) == 6
    scene = train[0]
    assert scene.image.shape == [3, 64, 64]
    assert scene.boxes, "synthesized scenes carry boxes"

    palette = sp.Palette.from_images(sp.environment_images(cfg), 4, seed=0)
    assert len(palette) == 4

    detector = sp.Detector.train(cfg, det_scenes)
    detections = detector.detect(scene.image, 0.05)
    assert all(0.0 <= d[1] <= 1.0 for d in detections)
    recall = detector.recall(cfg, held_out)
    assert 0.0 <= recall <= 1.0

    teacher, teacher_log = sp.train_teacher(cfg, train, detector)
    assert len(teacher_log) == 2
    pixels = teacher.pixels.data
    assert min(pixels) >= 0.0 and max(pixels) <= 1.0

    student, student_log = sp.train_student(cfg, train, detector, teacher, palette, distill=True)
    assert all(row[2] >= 0.0 for row in student_log)
    hard = student.render_hard()
    colors = {tuple(round(255 * hard.data[c * 64 + i]) for c in range(3)) for i in range(64)}
    assert colors <= {tuple(c) for c in palette.colors}, colors
    soft = student.render_soft(seed=1)
    assert soft.shape == [3, 8, 8]

    asr, mean_obj = sp.evaluate_patch(cfg, detector, held_out, hard)
    assert 0.0 <= asr <= 1.0 and 0.0 <= mean_obj <= 1.0
    similarity = sp.teacher_similarity(student, teacher)
    assert -1.0 <= similarity <= 1.0

    x = sp.Tensor([2, 2], [10.0, 20.0, 30.0, 40.0])
    assert sp.ssim(x, x) == 1.0

    print(f"ok: recall {recall:.3f}, asr {asr:.3f}, ssim {similarity:.3f}")


if __name__ == "__main__":
    main()
