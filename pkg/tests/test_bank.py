import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import silhouette_score

from langdet import bank as B
from langdet import tensor as T
from langdet.tensor import Tensor


def _bank(nc=5, n=6, dim=32, sigma=0.3, seed=0, orthogonal=False):
    names = [f"cat{k}" for k in range(nc)]
    descs = B.curate_descriptions(names, n_variants=n, seed=seed)
    return B.embed_synthetic(descs, dim=dim, sigma_in=sigma, seed=seed, orthogonal=orthogonal)


# curation ------------------------------------------------------------------------------


def test_curation_reproduces_the_worked_example():
    grids = {"view": ["side", "front"], "scale": ["small"], "weather": ["foggy"]}
    descs = B.curate_descriptions(["vehicle"], grids, n_variants=2, seed=0,
                                  template="A {view} view {medium} of a {scale} {category} in a {weather} day.",
                                  media=("photo",))
    assert descs[0].kind == "exemplar" and descs[0].text == "A photo of a vehicle."
    assert sorted(d.text for d in descs[1:]) == [
        "A front view photo of a small vehicle in a foggy day.",
        "A side view photo of a small vehicle in a foggy day.",
    ]


def test_curation_counts():
    assert len(B.curate_descriptions(["a", "b", "c"], n_variants=4)) == 15
    only = B.curate_descriptions(["a", "b"], n_variants=0)
    assert [d.kind for d in only] == ["exemplar", "exemplar"]


def test_curation_rejects_too_many_variants():
    grids = {"view": ["side"], "scale": ["small", "large"], "weather": ["clean"]}
    with pytest.raises(ValueError, match="exceeds"):
        B.curate_descriptions(["car"], grids, n_variants=3)


def test_curated_attributes_come_from_grids_and_are_distinct():
    descs = B.curate_descriptions(["car", "bus"], n_variants=8, seed=4)
    for cid in (0, 1):
        variants = [d for d in descs if d.category_id == cid and d.kind == "variant"]
        combos = {tuple(sorted(d.attributes.items())) for d in variants}
        assert len(combos) == 8
        for d in variants:
            for key, val in d.attributes.items():
                assert val in B.DEFAULT_GRIDS[key]
        assert sum(d.kind == "exemplar" for d in descs if d.category_id == cid) == 1


# embedding geometry -------------------------------------------------------------------


def test_zero_spread_variants_equal_exemplar():
    bank = _bank(sigma=0.0)
    intra, _ = B.cosine_margin(bank.embeddings(), bank.labels())
    assert intra == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(bank.variants, bank.exemplars[:, None, :], atol=1e-15)


def test_orthogonal_centroids():
    bank = _bank(nc=2, sigma=0.0, orthogonal=True)
    assert abs(bank.exemplars[0] @ bank.exemplars[1]) < 1e-12


def test_margin_matches_pairwise_oracle():
    bank = _bank(nc=5, sigma=0.1)
    x, labels = bank.embeddings(), bank.labels()
    intra, inter = B.cosine_margin(x, labels)
    same, diff = [], []
    for a in range(len(x)):
        for b in range(len(x)):
            if a == b:
                continue
            c = float(x[a] @ x[b] / np.linalg.norm(x[a]) / np.linalg.norm(x[b]))
            (same if labels[a] == labels[b] else diff).append(c)
    assert intra == pytest.approx(np.mean(same), abs=1e-12)
    assert inter == pytest.approx(np.mean(diff), abs=1e-12)
    assert intra > inter


def test_embed_rejects_bad_arguments():
    descs = B.curate_descriptions(["a"], n_variants=1)
    with pytest.raises(ValueError):
        B.embed_synthetic(descs, dim=4)
    with pytest.raises(ValueError):
        B.embed_synthetic(descs, sigma_in=-0.1)


def test_silhouette_matches_sklearn():
    bank = _bank(nc=4, n=5, sigma=0.6)
    x, labels = bank.embeddings(), bank.labels()
    for metric in ("cosine", "euclidean"):
        assert B.silhouette(x, labels, metric) == pytest.approx(
            silhouette_score(x, labels, metric=metric), abs=1e-10)


# merge ----------------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(0, 5), st.integers(8, 20))
def test_merge_is_exact_elementwise_sum(seed, nc, n, dim):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(nc * (n + 1), dim))
    c = rng.normal(size=(nc, dim))
    z = B.merge_prompts(d, c, n)
    assert z.shape[0] == nc * (n + 1)
    for row in range(z.shape[0]):
        assert np.array_equal(z[row], d[row] + c[row // (n + 1)])


def test_merge_identities():
    bank = _bank(nc=3, n=2)
    d = bank.embeddings()
    assert np.array_equal(B.merge_prompts(d, np.zeros((3, bank.dim)), 2), d)
    inverse = -bank.exemplars
    z = B.merge_prompts(d, inverse, 2)
    assert np.all(z[bank.exemplar_row(1)] == 0.0)
    with pytest.raises(ValueError, match="zero-norm"):
        T.cosine_rows(Tensor(z[bank.exemplar_row(1)]), Tensor(z))


def test_merge_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        B.merge_prompts(np.zeros((6, 4)), np.zeros((2, 5)), 2)
    with pytest.raises(ValueError):
        B.merge_prompts(np.zeros((7, 4)), np.zeros((2, 4)), 2)


# contrastive prompts ---------------------------------------------------------------------


def test_supcon_loss_matches_scalar_reference():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 5))
    labels = np.array([0, 0, 1, 1, 2, 2])
    tau = 0.1
    xn = z / np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    for a in range(6):
        others = [k for k in range(6) if k != a]
        denom = sum(np.exp(xn[a] @ xn[k] / tau) for k in others)
        pos = [k for k in others if labels[k] == labels[a]]
        total += -np.mean([np.log(np.exp(xn[a] @ xn[p] / tau) / denom) for p in pos])
    got = B.supervised_contrastive_loss(Tensor(z), labels, tau).item()
    assert got == pytest.approx(total / 6, rel=1e-10)


def test_contrastive_training_tightens_clusters():
    bank = _bank(nc=6, n=8, sigma=0.3)
    before = B.silhouette(bank.embeddings(), bank.labels())
    d_before = bank.embeddings().copy()
    prompts, curve = B.train_categorical_prompts(bank, epochs=100)
    trained = bank.with_prompts(prompts)
    after = B.silhouette(trained.z, trained.labels())
    assert after > before
    assert curve[-1] < curve[0]
    assert np.array_equal(bank.embeddings(), d_before)


def test_zero_epochs_keeps_initialisation():
    bank = _bank(nc=3, n=2)
    prompts, curve = B.train_categorical_prompts(bank, epochs=0, seed=5)
    expected = np.random.default_rng(5).normal(0.0, 0.02, size=(3, bank.dim))
    assert curve == [] and np.array_equal(prompts, expected)
    z = bank.with_prompts(prompts).z
    assert np.array_equal(z, bank.embeddings() + np.repeat(prompts, 3, axis=0))


def test_separated_bank_margin_does_not_drop():
    bank = _bank(nc=4, n=3, sigma=0.0, orthogonal=True)
    intra0, inter0 = B.cosine_margin(bank.embeddings(), bank.labels())
    prompts, _ = B.train_categorical_prompts(bank, epochs=50)
    intra1, inter1 = B.cosine_margin(bank.with_prompts(prompts).z, bank.labels())
    assert intra1 - inter1 >= intra0 - inter0 - 1e-6


def test_prompt_training_is_deterministic():
    bank = _bank(nc=3, n=3)
    a, _ = B.train_categorical_prompts(bank, epochs=20, seed=9)
    b, _ = B.train_categorical_prompts(bank, epochs=20, seed=9)
    assert np.array_equal(a, b)


def test_divergence_is_reported():
    bank = _bank(nc=2, n=2)
    with pytest.raises(FloatingPointError, match="diverged"):
        B.train_categorical_prompts(bank, epochs=3, lr=float("nan"))


# freezing and persistence ------------------------------------------------------------------


def test_frozen_bank_is_immutable():
    bank = _bank(nc=2, n=2)
    frozen = bank.with_prompts(np.zeros((2, bank.dim))).freeze()
    with pytest.raises(ValueError):
        frozen.variants[0, 0, 0] = 1.0
    with pytest.raises(RuntimeError):
        frozen.with_prompts(np.ones((2, bank.dim)))


def test_freeze_requires_prompts():
    with pytest.raises(RuntimeError):
        _bank().freeze()


def test_save_load_round_trip_is_bit_exact(tmp_path):
    bank = _bank(nc=3, n=4)
    prompts, _ = B.train_categorical_prompts(bank, epochs=5)
    frozen = B.freeze_and_save(bank.with_prompts(prompts), tmp_path / "bank.json")
    loaded = B.load_frozen(tmp_path / "bank.json")
    assert loaded.frozen and loaded.category_names == frozen.category_names
    assert np.array_equal(loaded.z, frozen.z)
    assert loaded.attributes == frozen.attributes
    assert loaded.digest() == frozen.digest()


def test_load_frozen_rejects_unfrozen(tmp_path):
    B.save_bank(_bank(nc=2, n=1), tmp_path / "raw.json")
    assert B.load_embeddings(tmp_path / "raw.json").prompts is None
    with pytest.raises(B.BankFormatError, match="not frozen"):
        B.load_frozen(tmp_path / "raw.json")


def _corrupt(tmp_path, edit):
    path = tmp_path / "bank.json"
    B.save_bank(_bank(nc=2, n=2, dim=8), path)
    doc = json.loads(path.read_text())
    edit(doc)
    path.write_text(json.dumps(doc))
    return path


@pytest.mark.parametrize("edit, message", [
    (lambda d: d["records"][4].pop("vector"), "record 4"),
    (lambda d: d["records"][1].__setitem__("vector", [0.0] * 7), "record 1: vector has 7"),
    (lambda d: d["records"].pop(3), "category 1 .* no exemplar"),
    (lambda d: d["records"][2].__setitem__("kind", "anchor"), "record 2: unknown kind"),
    (lambda d: d["header"].pop("N"), "header fields"),
    (lambda d: d["records"][0].__setitem__("category_id", 9), "record 0: category_id"),
])
def test_schema_violations_identify_the_record(tmp_path, edit, message):
    with pytest.raises(B.BankFormatError, match=message):
        B.load_embeddings(_corrupt(tmp_path, edit))


def test_build_bank_default_layout():
    bank = B.build_bank(epochs=10)
    assert bank.frozen and bank.num_categories == 7 and bank.num_variants == 8
    assert bank.size == 63 == bank.z.shape[0]
    assert bank.category_names[:3] == ["car", "truck", "bus"]
