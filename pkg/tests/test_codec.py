import numpy as np
import pytest
import torch
from sklearn.base import clone

from splatstyle.codec import FeatureCodec, decode, encode, feature_distance, pool_features, train_codec
from splatstyle.errors import TrainingFailureError, UsageError


def images(seed, n=6, size=16):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3)).astype(np.float32)


@pytest.fixture(scope="module")
def codec():
    return FeatureCodec(feature_dim=8, n_iter=30, random_state=3).fit(images(0))


def test_encode_is_deterministic(codec):
    img = images(1, 1)[0]
    assert torch.equal(encode(codec, img), encode(codec, img.copy()))
    assert encode(codec, img).shape == (8, 4, 4)


def test_constant_image_gives_constant_features(codec):
    z = encode(codec, np.full((16, 16, 3), 0.3, np.float32))
    assert torch.equal(z, z[:, :1, :1].expand_as(z))


def test_random_pair_has_positive_distance(codec):
    a, b = images(2, 2)
    assert feature_distance(encode(codec, a), encode(codec, b)) > 0


def test_decode_zero_map_is_constant_and_deterministic(codec):
    z = torch.zeros(8, 4, 4)
    out = decode(codec, z)
    assert out.shape == (16, 16, 3)
    # reflection padding keeps a constant input constant through the decoder
    assert torch.equal(out, out[:1, :1].expand_as(out))
    assert torch.equal(out, decode(codec, z))


def test_decode_output_in_unit_interval(codec):
    out = decode(codec, torch.randn(8, 4, 4) * 50)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_shape_errors(codec):
    with pytest.raises(UsageError):
        encode(codec, np.zeros((15, 16, 3), np.float32))
    with pytest.raises(UsageError):
        decode(codec, torch.zeros(7, 4, 4))
    with pytest.raises(UsageError):
        feature_distance(torch.zeros(8, 4, 4), torch.zeros(8, 4, 5))
    with pytest.raises(UsageError):
        FeatureCodec(n_iter=1).fit(np.zeros((0, 16, 16, 3), np.float32))


def test_zero_iterations_keep_initial_weights():
    a = FeatureCodec(feature_dim=8, n_iter=0, random_state=5).fit(images(0))
    b = FeatureCodec(feature_dim=8, n_iter=0, random_state=5)
    b._build()
    b.freeze()
    assert a.weights_hash() == b.weights_hash()


def test_training_is_reproducible(codec):
    again = clone(codec).fit(images(0))
    assert again.weights_hash() == codec.weights_hash()
    other = train_codec(images(0), iterations=30, feature_dim=8, seed=4)
    assert other.weights_hash() != codec.weights_hash()


def test_training_reduces_reconstruction_error():
    data = images(7, n=4, size=8)
    short = FeatureCodec(feature_dim=8, n_iter=0, random_state=1).fit(data)
    longer = FeatureCodec(feature_dim=8, n_iter=150, random_state=1).fit(data)
    assert longer.reconstruction_psnr(data) > short.reconstruction_psnr(data)


def test_divergence_raises_training_failure():
    with pytest.raises(TrainingFailureError):
        FeatureCodec(feature_dim=4, n_iter=50, learning_rate=1e30, random_state=0).fit(images(0, n=2, size=8))


def test_weights_are_frozen(codec):
    assert not any(p.requires_grad for p in codec.encoder_.parameters())
    assert not any(p.requires_grad for p in codec.decoder_.parameters())


def test_state_round_trip(codec):
    loaded = FeatureCodec(feature_dim=8, random_state=3).load_state_arrays(codec.state_arrays())
    assert loaded.weights_hash() == codec.weights_hash()
    img = images(9, 1)[0]
    assert torch.equal(loaded.encode(img), codec.encode(img))


def test_transformer_interface(codec):
    X = images(4, n=3)
    Z = codec.transform(X)
    assert Z.shape == (3, 8, 4, 4)
    assert codec.inverse_transform(Z).shape == X.shape


def test_feature_distance_properties():
    rng = np.random.default_rng(0)
    a = torch.from_numpy(rng.normal(size=(5, 6, 6)))
    b = torch.from_numpy(rng.normal(size=(5, 6, 6)))
    assert feature_distance(a, a) == 0.0
    assert feature_distance(a, b) == feature_distance(b, a)
    noise = torch.from_numpy(rng.normal(size=a.shape))
    values = [feature_distance(a, a + eps * noise) for eps in (1e-3, 1e-2, 1e-1)]
    assert values[0] < values[1] < values[2]


def test_pool_features():
    fm = torch.arange(2 * 4 * 4, dtype=torch.float64).view(4, 4, 2)
    pooled = pool_features(fm, 2)
    assert pooled.shape == (2, 2, 2)
    assert float(pooled[0, 0, 0]) == pytest.approx(float(fm[:2, :2, 0].mean()))
    assert torch.equal(pool_features(fm, 1), fm.permute(2, 0, 1))
