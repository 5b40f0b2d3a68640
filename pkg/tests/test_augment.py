import random

import pytest

from trialkit.augment import (
    AugmentConfig,
    AugmentError,
    build_batch,
    make_global_negative,
    make_global_positive,
    make_local_sample,
)
from trialkit.corpus import KEY_ATTRIBUTES, Corpus, Trial

from test_knowledge import small_map


def make_trial(i: int, disease: str = "major depressive disorder", **over) -> Trial:
    fields = dict(
        id=f"T{i:03d}",
        title=f"Study {i} of electroacupuncture for {disease}",
        intervention="electroacupuncture",
        disease=disease,
        outcome="change in depression severity",
        keywords="depression",
        context=f"long description {i}\n\ninclusion criteria {i}",
    )
    fields.update(over)
    return Trial(**fields)


@pytest.fixture
def corpus() -> Corpus:
    trials = [
        make_trial(0),
        make_trial(1),
        make_trial(2, disease="ovarian cancer"),
        make_trial(3, disease="Major  Depressive Disorder"),
    ]
    return Corpus.from_trials(trials)


class TestGlobalPositive:
    def test_exactly_one_attribute_dropped(self):
        trial = make_trial(0)
        out = make_global_positive(trial, random.Random(0))
        dropped = [n for n in KEY_ATTRIBUTES
                   if getattr(trial, n) and not getattr(out, n)]
        assert len(dropped) == 1
        for name in KEY_ATTRIBUTES:
            if name not in dropped:
                assert getattr(out, name) == getattr(trial, name)
        assert out.context == trial.context

    def test_two_attribute_trial_keeps_one(self):
        trial = Trial(id="A", title="only title", intervention="",
                      disease="only disease", outcome="")
        out = make_global_positive(trial, random.Random(1))
        kept = [n for n in ("title", "disease") if getattr(out, n)]
        assert len(kept) == 1

    def test_single_attribute_rejected(self):
        trial = Trial(id="A", title="only title", intervention="",
                      disease="", outcome="")
        with pytest.raises(AugmentError):
            make_global_positive(trial, random.Random(0))

    def test_deterministic(self):
        trial = make_trial(0)
        a = make_global_positive(trial, random.Random(42))
        b = make_global_positive(trial, random.Random(42))
        assert a == b

    def test_drop_choice_uniform_over_nonempty(self):
        trial = make_trial(0)
        rng = random.Random(0)
        dropped = set()
        for _ in range(200):
            out = make_global_positive(trial, rng)
            dropped.update(n for n in KEY_ATTRIBUTES
                           if getattr(trial, n) and not getattr(out, n))
        assert dropped == set(KEY_ATTRIBUTES)


class TestGlobalNegative:
    def test_attr_kind_swaps_co_disease_title(self, corpus):
        anchor = corpus.get("T000")
        donors = {corpus.get("T001").title, corpus.get("T003").title}
        negative, fallback = make_global_negative(anchor, corpus, "attr",
                                                  random.Random(0))
        assert not fallback
        assert negative.title in donors
        for name in ("intervention", "disease", "outcome", "keywords", "context"):
            assert getattr(negative, name) == getattr(anchor, name)

    def test_ctx_kind_swaps_context_only(self, corpus):
        anchor = corpus.get("T000")
        donors = {corpus.get("T001").context, corpus.get("T003").context}
        negative, fallback = make_global_negative(anchor, corpus, "ctx",
                                                  random.Random(0))
        assert not fallback
        assert negative.context in donors
        assert negative.title == anchor.title

    def test_unique_disease_falls_back(self, corpus):
        anchor = corpus.get("T002")  # only ovarian cancer trial
        negative, fallback = make_global_negative(anchor, corpus, "attr",
                                                  random.Random(0))
        assert fallback
        assert negative.title != anchor.title

    def test_disease_key_normalization_links_donors(self, corpus):
        # T003's disease differs in spacing/case only
        anchor = corpus.get("T003")
        _, fallback = make_global_negative(anchor, corpus, "attr", random.Random(0))
        assert not fallback

    def test_corpus_of_one_rejected(self):
        lone = Corpus.from_trials([make_trial(0)])
        with pytest.raises(AugmentError):
            make_global_negative(make_trial(0), lone, "attr", random.Random(0))

    def test_unknown_kind_rejected(self, corpus):
        with pytest.raises(ValueError):
            make_global_negative(corpus.get("T000"), corpus, "title", random.Random(0))


class TestLocalSample:
    def test_dissimilar_replacement_shape(self):
        kmap = small_map()
        text = "Safety and Efficacy of Olaparib"
        rng = random.Random(4)
        for _ in range(30):
            sample = make_local_sample(text, kmap, n_neg=2, rng=rng)
            assert sample.anchor_text == text
            for negative in sample.negative_texts:
                assert negative != text
        # across draws the substitution branch must eventually produce
        # "Safety and Efficacy of <other concept>"
        rng = random.Random(4)
        seen = set()
        for _ in range(30):
            seen.update(make_local_sample(text, kmap, 2, rng).negative_texts)
        assert any(s.startswith("Safety and Efficacy of ") and "Olaparib" not in s
                   for s in seen)

    def test_deletion_branch_normalizes_whitespace(self):
        kmap = small_map()
        text = "electroacupuncture helps mood"
        rng = random.Random(0)
        seen = set()
        for _ in range(40):
            seen.update(make_local_sample(text, kmap, 1, rng).negative_texts)
        assert "helps mood" in seen  # deletion of the leading mention, no stray space

    def test_positive_changes_single_region(self):
        kmap = small_map()
        text = "warfarin for mdd patients"
        sample = make_local_sample(text, kmap, 1, random.Random(9))
        # positive rewrites exactly one mention span; suffix or prefix survives
        assert sample.positive_text != text
        assert sample.positive_text.endswith(" patients")

    def test_no_entity_errors(self):
        with pytest.raises(AugmentError, match="no entity"):
            make_local_sample("nothing to find here", small_map(), 1, random.Random(0))

    def test_deterministic(self):
        kmap = small_map()
        text = "olaparib and vitamin d for mdd"
        a = make_local_sample(text, kmap, 3, random.Random(5))
        b = make_local_sample(text, kmap, 3, random.Random(5))
        assert a == b

    def test_n_neg_respected(self):
        kmap = small_map()
        sample = make_local_sample("olaparib study", kmap, 4, random.Random(1))
        assert len(sample.negative_texts) == 4


class TestBuildBatch:
    def test_mix_ratio_half_alternates(self, corpus):
        kmap = small_map()
        trials = [corpus.get("T000"), corpus.get("T001")]
        batch = build_batch(trials, corpus, kmap, AugmentConfig(mix_ratio_ctx=0.5),
                            random.Random(0))
        kinds = [s.negative_kind for s in batch.global_samples]
        assert sorted(kinds) == ["attr", "ctx"]

    def test_one_global_sample_per_trial(self, corpus):
        kmap = small_map()
        trials = list(corpus)
        batch = build_batch(trials, corpus, kmap, AugmentConfig(), random.Random(0))
        assert len(batch.global_samples) == len(trials)
        assert [s.anchor.id for s in batch.global_samples] == [t.id for t in trials]

    def test_all_ctx_when_attr_disabled(self, corpus):
        kmap = small_map()
        batch = build_batch(list(corpus), corpus, kmap, AugmentConfig(),
                            random.Random(0), use_attr_negatives=False)
        assert {s.negative_kind for s in batch.global_samples} == {"ctx"}

    def test_no_hard_negatives_when_both_disabled(self, corpus):
        kmap = small_map()
        batch = build_batch(list(corpus), corpus, kmap, AugmentConfig(),
                            random.Random(0), use_attr_negatives=False,
                            use_ctx_negatives=False)
        assert all(s.hard_negative is None for s in batch.global_samples)

    def test_local_skips_recorded(self, corpus):
        kmap = small_map()
        plain = make_trial(9, title="plain words only", intervention="nothing known",
                           keywords="", outcome="no concepts at all",
                           disease="unmapped condition")
        extended = Corpus.from_trials(list(corpus) + [plain])
        batch = build_batch([plain], extended, kmap, AugmentConfig(),
                            random.Random(0))
        assert batch.local_skips == ["T009"]
        assert batch.local_samples == []

    def test_local_disabled(self, corpus):
        kmap = small_map()
        batch = build_batch(list(corpus), corpus, kmap, AugmentConfig(),
                            random.Random(0), include_local=False)
        assert batch.local_samples == [] and batch.local_skips == []

    def test_positive_agrees_except_dropped(self, corpus):
        kmap = small_map()
        batch = build_batch(list(corpus), corpus, kmap, AugmentConfig(),
                            random.Random(3))
        for sample in batch.global_samples:
            diffs = [n for n in KEY_ATTRIBUTES
                     if getattr(sample.anchor, n) != getattr(sample.positive, n)]
            assert len(diffs) == 1
            assert getattr(sample.positive, diffs[0]) == ""
            assert sample.positive.context == sample.anchor.context

    def test_attr_negative_agrees_on_other_fields(self, corpus):
        kmap = small_map()
        batch = build_batch(list(corpus), corpus, kmap,
                            AugmentConfig(mix_ratio_ctx=0.0), random.Random(3))
        for sample in batch.global_samples:
            assert sample.negative_kind == "attr"
            negative = sample.hard_negative
            for name in ("intervention", "disease", "outcome", "keywords"):
                assert getattr(negative, name) == getattr(sample.anchor, name)
            assert negative.context == sample.anchor.context

    def test_empty_batch_rejected(self, corpus):
        with pytest.raises(AugmentError):
            build_batch([], corpus, small_map(), AugmentConfig(), random.Random(0))


def test_mix_ratio_extremes(corpus=None):
    from trialkit.augment import _negative_kinds
    assert _negative_kinds(4, 0.0) == ["attr"] * 4
    assert _negative_kinds(4, 1.0) == ["ctx"] * 4
    assert _negative_kinds(2, 0.5) == ["attr", "ctx"]
    kinds = _negative_kinds(10, 0.3)
    assert kinds.count("ctx") == 3
