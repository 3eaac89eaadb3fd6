import numpy as np
import pytest

from posgen.codec import IdentityCodec, LinearCodec
from posgen.toy import (
    DIRECTIONS,
    MOTION_CLASSES,
    all_captions,
    centroid_track,
    describe_frame,
    make_toy_dataset,
    motion_class_probs,
    video_features,
)


def test_single_video_uses_template_caption():
    (video,) = make_toy_dataset(1, 0)
    assert video.caption in set(all_captions())
    assert video.latent.shape == (8, 1, 16, 16)
    assert video.latent.min() >= -1.0 and video.latent.max() <= 1.0


def test_seeded_and_split_disjoint():
    a, b = make_toy_dataset(20, 3), make_toy_dataset(20, 3)
    assert [v.caption for v in a] == [v.caption for v in b]
    assert all(np.array_equal(x.latent, y.latent) for x, y in zip(a, b))
    evals = make_toy_dataset(20, 3, "eval")
    assert not {v.id for v in a} & {v.id for v in evals}
    assert any(not np.array_equal(x.latent, y.latent) for x, y in zip(a, evals))
    with pytest.raises(ValueError):
        make_toy_dataset(0, 0)


def test_rightward_captions_move_right():
    videos = [v for v in make_toy_dataset(300, 1) if " moves right " in v.caption]
    assert videos
    for v in videos:
        xs = centroid_track(v.latent)[:, 0]
        assert np.all(np.diff(xs) > 0), v.caption


def test_motion_classes_recover_direction():
    for v in make_toy_dataset(100, 2):
        probs = motion_class_probs(v.latent)
        assert probs.sum() == pytest.approx(1.0)
        direction, speed = MOTION_CLASSES[int(np.argmax(probs))]
        assert direction == v.params.direction
        assert direction in DIRECTIONS


def test_frame_descriptions_name_the_region():
    for v in make_toy_dataset(50, 4):
        mid = v.latent[len(v.latent) // 2]
        text = describe_frame(mid)
        assert text.startswith(f"a {v.params.size} blob in the")
    assert describe_frame(-np.ones((1, 16, 16))) == "an empty frame"


def test_features_have_fixed_width():
    v = make_toy_dataset(1, 0)[0]
    assert video_features(v.latent).shape == (8, 7)
    assert video_features(v.latent, [0, 3]).shape == (2, 7)


def test_codecs_round_trip():
    z = np.random.default_rng(0).standard_normal((8, 1, 4, 4))
    assert np.array_equal(IdentityCodec().decode(IdentityCodec().encode(z)), z)
    codec = LinearCodec((1, 4, 4), seed=1)
    np.testing.assert_allclose(codec.decode(codec.encode(z)), z, atol=1e-10)
