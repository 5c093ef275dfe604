import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localcal.errors import EpsilonTooLarge, SpecInvalid
from localcal.synth import (
    SynthSpec,
    default_benchmark,
    generate,
    inject_local_miscalibration,
    load_synth_spec,
    spec_to_dict,
    toy_region_ids,
)
from localcal.numerics import softmax


def test_generation_is_seeded():
    a, pa = generate(SynthSpec(n=300, seed=9))
    b, pb = generate(SynthSpec(n=300, seed=9))
    c, _ = generate(SynthSpec(n=300, seed=10))
    assert a.same_content(b)
    np.testing.assert_array_equal(pa, pb)
    assert not a.same_content(c)


def test_gaussian_mixture_logits_are_true_posteriors():
    d, p = generate(SynthSpec(n=500, seed=1))
    np.testing.assert_allclose(softmax(d.logits), p, atol=1e-12)


def test_default_benchmark_is_learnable_but_miscalibrated():
    d, p = generate(default_benchmark(0, n=8000))
    bayes = np.mean(p.argmax(axis=1) == d.labels)
    assert 0.80 < bayes < 0.90
    # corrupted confidences sit above the true ones on average
    assert softmax(d.logits).max(axis=1).mean() > p.max(axis=1).mean() + 0.03


def test_toy_regions_layout():
    d, truth = generate(SynthSpec(generator="toy_regions"))
    regions = toy_region_ids(d)
    for name, freq in (("A", 0.95), ("B", 0.55), ("F", 0.05)):
        assert np.mean(d.labels[regions == name]) == pytest.approx(freq)
        np.testing.assert_allclose(truth[regions == name, 1], freq)


def test_proximity_biased_is_globally_calibrated():
    d, truth = generate(SynthSpec(generator="proximity_biased", n=4000))
    pred = softmax(d.logits)[0]
    np.testing.assert_allclose(truth.mean(axis=0), pred, atol=1e-12)
    with pytest.raises(SpecInvalid):
        generate(SynthSpec(generator="proximity_biased", shift=0.2))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.5), st.sampled_from(["uniform_l1", "per_class"]), st.integers(0, 1000))
def test_injection_respects_eps(eps, mode, seed):
    d, p = generate(SynthSpec(n=200, seed=seed % 7))
    out, realized = inject_local_miscalibration(d, p, eps, mode, seed)
    assert np.all(realized <= eps + 1e-9)
    q = softmax(out.logits)
    np.testing.assert_allclose(np.abs(q - p).sum(axis=1), realized, atol=1e-9)
    np.testing.assert_array_equal(out.labels, d.labels)


def test_injection_hits_eps_away_from_boundary():
    p = np.full((50, 4), 0.25)
    d, _ = generate(SynthSpec(n=50))
    _, realized = inject_local_miscalibration(d, p, 0.1)
    np.testing.assert_allclose(realized, 0.1, atol=1e-9)
    with pytest.raises(EpsilonTooLarge, match="2"):
        inject_local_miscalibration(d, p, 2.5)


def test_spec_validation():
    with pytest.raises(SpecInvalid):
        SynthSpec(generator="nope")
    with pytest.raises(SpecInvalid):
        SynthSpec(priors=(0.5, 0.5))
    with pytest.raises(SpecInvalid):
        SynthSpec(n_classes=1)


def test_config_file(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text("generator = benchmark\nn = 123\npriors = 0.1,0.2,0.3,0.4\n")
    spec = load_synth_spec(path, seed=4)
    assert (spec.generator, spec.n, spec.seed, spec.t_corrupt) == ("temperature_corrupted", 123, 4, 2.0)
    assert spec.priors == (0.1, 0.2, 0.3, 0.4)
    assert spec_to_dict(spec)["priors"] == [0.1, 0.2, 0.3, 0.4]
    (tmp_path / "bad.ini").write_text("[synth]\nwhat = 1\n")
    with pytest.raises(SpecInvalid):
        load_synth_spec(tmp_path / "bad.ini")
