import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from judgefuse.core import (
    OVERALL,
    DimensionError,
    EmbeddedItem,
    EvaluatorModel,
    JudgeLabel,
    JudgePanel,
    ModelFormatError,
    PreferenceRecord,
    QualityHead,
    load_model,
    model_from_bytes,
    model_to_bytes,
    normal_cdf,
    preference_probability,
    quality_score,
    save_model,
)


def random_head(rng, dims=(5, 7, 3, 1)):
    ws = [rng.normal(size=(o, i)) for i, o in zip(dims[:-1], dims[1:])]
    bs = [rng.normal(size=o) for o in dims[1:]]
    return QualityHead(tuple(ws), tuple(bs))


def item(vec, name="x"):
    return EmbeddedItem(name, np.asarray(vec, dtype=float))


# --- labels and records ----------------------------------------------------


def test_label_mirror():
    assert JudgeLabel.WIN_A.mirror() is JudgeLabel.WIN_B
    assert JudgeLabel.WIN_B.mirror() is JudgeLabel.WIN_A
    assert JudgeLabel.FAIR.mirror() is JudgeLabel.FAIR
    assert len(JudgeLabel) == 3


def test_label_parse_rejects_junk():
    with pytest.raises(ValueError, match="illegal label"):
        JudgeLabel.parse("tie")


def test_item_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        item([1.0, float("nan")])


def test_record_rejects_self_pair():
    with pytest.raises(ValueError):
        PreferenceRecord("p", "a", "a", {"j": {OVERALL: "A"}})


def test_record_informative_count_and_mirror():
    rec = PreferenceRecord("p", "a", "b", {"j1": {OVERALL: "A"}, "j2": {OVERALL: "Fair"}, "j3": {OVERALL: "B"}})
    assert rec.n_informative(OVERALL) == 2
    m = rec.mirrored("q")
    assert (m.item_a, m.item_b) == ("b", "a")
    assert m.label("j1", OVERALL) is JudgeLabel.WIN_B
    assert PreferenceRecord.from_json(rec.to_json()) == rec


# --- quality score ------------------------------------------------------------


def test_zero_head_scores_zero():
    head = QualityHead((np.zeros((4, 3)), np.zeros((1, 4))), (np.zeros(4), np.zeros(1)))
    assert quality_score(head, item([1.0, -2.0, 3.0])) == 0.0


def test_linear_head_projects_first_coordinate():
    head = QualityHead((np.array([[1.0, 0.0]]),), (np.zeros(1),))
    assert quality_score(head, item([3.5, -2.0])) == 3.5


def test_forward_matches_straight_line_reimplementation():
    rng = np.random.default_rng(3)
    head = random_head(rng)
    x = rng.normal(size=5)
    # loops over scalars, no matrix products
    h = list(x)
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        nxt = []
        for r in range(w.shape[0]):
            s = b[r]
            for c in range(w.shape[1]):
                s += w[r, c] * h[c]
            nxt.append(math.tanh(s) if k < len(head.weights) - 1 else s)
        h = nxt
    assert abs(quality_score(head, item(x)) - h[0]) <= 1e-12


def test_dimension_mismatch():
    head = random_head(np.random.default_rng(0))
    with pytest.raises(DimensionError) as err:
        quality_score(head, item([1.0, 2.0]))
    assert err.value.expected == 5 and err.value.actual == 2


def test_head_rejects_bad_shapes():
    with pytest.raises(ValueError):
        QualityHead((np.zeros((3, 2)), np.zeros((1, 4))), (np.zeros(3), np.zeros(1)))
    with pytest.raises(ValueError):
        QualityHead((np.zeros((2, 2)),), (np.zeros(2),))
    with pytest.raises(ValueError):
        QualityHead((np.zeros((1, 2)),), (np.zeros(1),), sigma=0.0)


# --- normal cdf and the preference probability -----------------------------------


def quad_cdf(z):
    val, _ = integrate.quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -math.inf, z)
    return val


def test_normal_cdf_values():
    assert normal_cdf(0.0) == 0.5
    assert abs(normal_cdf(1.0) - 0.8413447) <= 1e-6
    assert abs(normal_cdf(1.0) - quad_cdf(1.0)) <= 1e-9
    assert abs(normal_cdf(-2.0) - 0.0227501) <= 1e-6
    assert abs(normal_cdf(-2.0) - (1 - quad_cdf(2.0))) <= 1e-9


def test_normal_cdf_rejects_nan():
    with pytest.raises(ValueError):
        normal_cdf(float("nan"))


def test_identical_items_give_half():
    head = random_head(np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=5)
    assert preference_probability(head, item(x, "a"), item(x, "b")) == 0.5


def test_score_gap_sqrt2_gives_phi1():
    head = QualityHead((np.array([[1.0, 0.0]]),), (np.zeros(1),))
    p = preference_probability(head, item([0.0, 0.0]), item([math.sqrt(2.0), 0.0]))
    assert abs(p - 0.8413447) <= 1e-6


vectors = st.lists(st.floats(-3, 3), min_size=5, max_size=5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), xa=vectors, xb=vectors)
def test_antisymmetry(seed, xa, xb):
    head = random_head(np.random.default_rng(seed))
    a, b = item(xa, "a"), item(xb, "b")
    assert abs(preference_probability(head, a, b) + preference_probability(head, b, a) - 1.0) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(-50, 50), xa=vectors, xb=vectors)
def test_output_bias_shift_invariance(seed, c, xa, xb):
    head = random_head(np.random.default_rng(seed))
    shifted = head.replace(biases=(*head.biases[:-1], head.biases[-1] + c))
    a, b = item(xa, "a"), item(xb, "b")
    assert abs(preference_probability(head, a, b) - preference_probability(shifted, a, b)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.floats(0.05, 20), xa=vectors, xb=vectors)
def test_scale_coupling(seed, k, xa, xb):
    head = random_head(np.random.default_rng(seed))
    scaled = head.replace(
        weights=(*head.weights[:-1], head.weights[-1] * k),
        biases=(*head.biases[:-1], head.biases[-1] * k),
        sigma=head.sigma * k,
    )
    a, b = item(xa, "a"), item(xb, "b")
    assert abs(preference_probability(head, a, b) - preference_probability(scaled, a, b)) <= 1e-10


def test_monotone_in_score_gap():
    head = QualityHead((np.array([[1.0]]),), (np.zeros(1),))
    ps = [preference_probability(head, item([0.0]), item([t])) for t in np.linspace(-5, 5, 41)]
    assert all(p2 > p1 for p1, p2 in zip(ps, ps[1:]))


# --- panel and model file ---------------------------------------------------------


def make_model(rng, heads=(OVERALL, "Safety")):
    judges = ("judge a", "judge-b", "jüdge c")
    panel = JudgePanel(
        judges,
        {h: rng.normal(size=3) for h in heads},
        {h: rng.normal(size=3) for h in heads},
    )
    return EvaluatorModel(5, {h: random_head(rng) for h in heads}, panel)


def test_panel_uniform_and_bounds():
    panel = JudgePanel.uniform(["a", "b"], [OVERALL], 0.5)
    assert np.all(panel.alpha(OVERALL) == 0.5)
    with pytest.raises(ValueError):
        JudgePanel.uniform(["a"], [OVERALL], 1.0)
    with pytest.raises(ValueError):
        JudgePanel(("a", "a"), {OVERALL: [0, 0]}, {OVERALL: [0, 0]})


def test_model_requires_overall_and_known_heads():
    rng = np.random.default_rng(0)
    panel = JudgePanel.uniform(["a"], ["Safety"])
    with pytest.raises(ValueError, match="Overall"):
        EvaluatorModel(5, {"Safety": random_head(rng)}, panel)
    panel = JudgePanel.uniform(["a"], [OVERALL, "Vibes"])
    with pytest.raises(ValueError, match="unknown head"):
        EvaluatorModel(5, {OVERALL: random_head(rng), "Vibes": random_head(rng)}, panel)


def test_model_file_round_trip(tmp_path):
    model = make_model(np.random.default_rng(5))
    path = tmp_path / "m.mtde"
    save_model(model, path)
    back = load_model(path)
    assert back.panel.judges == model.panel.judges
    for h in model.heads:
        for w1, w2 in zip(model.head(h).weights, back.head(h).weights):
            assert np.array_equal(w1, w2)
        assert np.array_equal(model.panel.alpha_logit[h], back.panel.alpha_logit[h])
        assert np.array_equal(model.panel.beta_logit[h], back.panel.beta_logit[h])
    assert model_to_bytes(back) == path.read_bytes()


def test_model_file_corruption_detected():
    buf = bytearray(model_to_bytes(make_model(np.random.default_rng(6))))
    with pytest.raises(ModelFormatError, match="magic"):
        model_from_bytes(b"XXXX" + bytes(buf[4:]))
    flipped = bytearray(buf)
    flipped[40] ^= 0x01
    with pytest.raises(ModelFormatError, match="CRC"):
        model_from_bytes(bytes(flipped))
    with pytest.raises(ModelFormatError):
        model_from_bytes(bytes(buf[:30]))
