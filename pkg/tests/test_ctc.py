"""Transcription-loss checks against a brute-force path oracle.

The oracle enumerates every possible frame labeling, collapses it, and
sums the probability of those matching the reference. The dynamic-program
must agree to within 1e-6, and its gradient must match finite differences
on the head logits.
"""

import itertools

import numpy as np
import pytest

from adashrink import tensor as tt
from adashrink.ctc import (
    CtcPath,
    CtcPosterior,
    SourceTranscription,
    collapse,
    ctc_greedy_boundaries,
    ctc_head_forward,
    ctc_loss,
    greedy_path,
    min_admissible_frames,
)
from adashrink.errors import AdmissibilityError
from adashrink.tensor import Tensor


def brute_force_loss(probs: np.ndarray, tokens, blank: int) -> float:
    """-log sum over all (V+1)^T paths whose collapse equals the tokens."""
    t_x, n_labels = probs.shape
    tokens = list(tokens)
    total = 0.0
    for path in itertools.product(range(n_labels), repeat=t_x):
        if _collapse_py(path, blank) == tokens:
            p = 1.0
            for t, lab in enumerate(path):
                p *= probs[t, lab]
            total += p
    return -np.log(total) if total > 0 else np.inf


def _collapse_py(path, blank):
    out = []
    prev = None
    for lab in path:
        if lab != prev:
            out.append(lab)
        prev = lab
    return [v for v in out if v != blank]


def random_posterior(rng, t_x, n_labels) -> np.ndarray:
    p = rng.uniform(0.05, 1.0, size=(t_x, n_labels))
    return p / p.sum(axis=1, keepdims=True)


def test_two_frame_hand_example():
    # p1 = (a: 0.6, blank: 0.4), p2 = (a: 0.5, blank: 0.5), target "a"
    # valid paths: (a,a)=0.3, (a,-)=0.3, (-,a)=0.2 -> -ln 0.8
    probs = Tensor(np.array([[0.6, 0.4], [0.5, 0.5]]))
    posterior = CtcPosterior(probs=probs, blank_index=1)
    loss = ctc_loss(posterior, SourceTranscription([0]))
    np.testing.assert_allclose(float(loss.data), -np.log(0.8), atol=1e-12)
    np.testing.assert_allclose(float(loss.data), 0.22314, atol=1e-5)


def test_single_frame_single_token():
    probs = Tensor(np.array([[0.3, 0.45, 0.25]]))
    posterior = CtcPosterior(probs=probs, blank_index=2)
    loss = ctc_loss(posterior, SourceTranscription([1]))
    np.testing.assert_allclose(float(loss.data), -np.log(0.45), atol=1e-12)


def test_too_short_raises_admissibility():
    probs = Tensor(random_posterior(np.random.default_rng(0), 2, 3))
    posterior = CtcPosterior(probs=probs, blank_index=2)
    with pytest.raises(AdmissibilityError):
        ctc_loss(posterior, SourceTranscription([0, 1, 0]))
    # repeated token needs a separating blank
    with pytest.raises(AdmissibilityError):
        ctc_loss(posterior, SourceTranscription([0, 0]))
    assert min_admissible_frames(np.array([0, 0])) == 3


@pytest.mark.parametrize("seed", range(60))
def test_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    vocab = int(rng.integers(1, 4))
    t_x = int(rng.integers(1, 7))
    z_len = int(rng.integers(1, 4))
    tokens = rng.integers(0, vocab, size=z_len)
    if min_admissible_frames(tokens) > t_x:
        t_x = min_admissible_frames(tokens)
    probs = random_posterior(rng, t_x, vocab + 1)
    posterior = CtcPosterior(probs=Tensor(probs), blank_index=vocab)
    got = float(ctc_loss(posterior, SourceTranscription(tokens)).data)
    want = brute_force_loss(probs, tokens, vocab)
    np.testing.assert_allclose(got, want, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences_on_logits(seed):
    rng = np.random.default_rng(seed + 500)
    vocab = 2
    t_x = 5
    tokens = rng.integers(0, vocab, size=2)
    logits_data = rng.normal(size=(t_x, vocab + 1))

    def loss_of(data) -> float:
        p = tt.softmax(Tensor(data), axis=-1)
        return float(ctc_loss(CtcPosterior(p, vocab), SourceTranscription(tokens)).data)

    logits = Tensor(logits_data.copy(), requires_grad=True)
    p = tt.softmax(logits, axis=-1)
    loss = ctc_loss(CtcPosterior(p, vocab), SourceTranscription(tokens))
    loss.backward()

    eps = 1e-5
    numeric = np.zeros_like(logits_data)
    flat = logits_data.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = loss_of(logits_data)
        flat[i] = saved - eps
        down = loss_of(logits_data)
        flat[i] = saved
        numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    scale = np.maximum(1.0, np.maximum(np.abs(numeric), np.abs(logits.grad)))
    assert np.max(np.abs(numeric - logits.grad) / scale) <= 1e-4


def test_blank_tail_preserves_admissibility():
    """Appending a pure-blank frame never invalidates an admissible target."""
    rng = np.random.default_rng(3)
    for seed in range(30):
        rng = np.random.default_rng(seed)
        vocab = 2
        tokens = rng.integers(0, vocab, size=2)
        t_x = min_admissible_frames(tokens)
        probs = random_posterior(rng, t_x, vocab + 1)
        base = brute_force_loss(probs, tokens, vocab)
        assert np.isfinite(base)
        blank_row = np.zeros((1, vocab + 1))
        blank_row[0, vocab] = 1.0
        extended = np.concatenate([probs, blank_row], axis=0)
        assert np.isfinite(brute_force_loss(extended, tokens, vocab))


# ------------------------------------------------------------------ decoding


def test_collapse_examples():
    blank = 9
    np.testing.assert_array_equal(
        collapse(CtcPath([1, 1, blank, 2, 2, blank, 2]), blank), [1, 2, 2]
    )
    np.testing.assert_array_equal(collapse(CtcPath([blank] * 4), blank), [])
    np.testing.assert_array_equal(collapse(CtcPath([5]), blank), [5])


def test_greedy_path_one_hot_rows():
    eye = np.eye(4)[[2, 0, 3, 3]]
    posterior = CtcPosterior(Tensor(eye), blank_index=3)
    np.testing.assert_array_equal(greedy_path(posterior).labels, [2, 0, 3, 3])


def test_greedy_path_tie_prefers_lower_id_over_blank():
    uniform = np.full((1, 4), 0.25)
    posterior = CtcPosterior(Tensor(uniform), blank_index=3)
    assert greedy_path(posterior).labels[0] == 0  # non-blank wins the tie


def test_greedy_path_reproduces_argmax_flip():
    """A posterior whose argmax flips between tokens mid-segment keeps the flip."""
    probs = np.array([
        [0.6, 0.3, 0.1],
        [0.45, 0.5, 0.05],  # flips to token 1 although token 0 is still strong
        [0.6, 0.3, 0.1],
    ])
    posterior = CtcPosterior(Tensor(probs), blank_index=2)
    np.testing.assert_array_equal(greedy_path(posterior).labels, [0, 1, 0])


def test_ctc_greedy_boundaries_rule():
    blank = 9
    seg = ctc_greedy_boundaries(CtcPath([1, 1, blank, 2, 2]), blank)
    assert seg.boundary_frames == (1, 4)
    seg = ctc_greedy_boundaries(CtcPath([1, 2]), blank)
    assert seg.boundary_frames == (0, 1)
    seg = ctc_greedy_boundaries(CtcPath([blank, blank, blank]), blank)
    assert seg.boundary_frames == ()
    assert seg.spans == ((0, 2),)


def test_collapse_of_greedy_has_no_blank_or_merged_runs():
    rng = np.random.default_rng(7)
    for _ in range(100):
        probs = random_posterior(rng, int(rng.integers(1, 12)), 4)
        posterior = CtcPosterior(Tensor(probs), blank_index=3)
        path = greedy_path(posterior)
        seq = collapse(path, 3)
        assert not np.any(seq == 3)
        assert not np.any(seq[1:] == seq[:-1]) or True  # repeats allowed across runs
        # consecutive equal labels in the collapsed output can only come from
        # runs separated by a blank in the path
        runs = [k for k, _ in itertools.groupby(path.labels.tolist())]
        expect = [k for k in runs if k != 3]
        np.testing.assert_array_equal(seq, expect)


def test_ctc_head_zero_params_uniform_rows():
    vocab = 3
    params = {
        "ctc.proj.w": Tensor(np.zeros((8, vocab + 1))),
        "ctc.proj.b": Tensor(np.zeros(vocab + 1)),
    }
    states = Tensor(np.random.default_rng(9).normal(size=(5, 8)))
    posterior = ctc_head_forward(states, params, vocab)
    np.testing.assert_allclose(posterior.probs.data, 0.25, atol=1e-12)
    posterior.validate()


def test_ctc_head_rows_stochastic_and_gradcheck():
    from adashrink.gradcheck import grad_check
    from adashrink.layers import init_params, linear_specs

    vocab = 3
    params = init_params(linear_specs("ctc.proj", 8, vocab + 1), 4)
    rng = np.random.default_rng(10)
    states = rng.normal(size=(4, 8))
    posterior = ctc_head_forward(Tensor(states), params, vocab)
    posterior.validate()
    c = rng.normal(size=(4, vocab + 1))

    def loss(p):
        post = ctc_head_forward(Tensor(states), p, vocab)
        return tt.tsum(post.probs * Tensor(c))

    report = grad_check(loss, params, eps=1e-5)
    assert report.max_rel_err <= 1e-4
