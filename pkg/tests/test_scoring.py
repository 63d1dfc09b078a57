import numpy as np
import pytest

from icvedit.errors import (
    RaterRangeError,
    RaterSchemaError,
    RaterTransportError,
    ShapeError,
    ValidationError,
)
from icvedit.latents import PixelVideo
from icvedit.scoring import (
    MockRater,
    ScoreCard,
    aggregate_benchmark,
    category_scores,
    overall_from_categories,
    parse_rater_response,
    proxy_metrics,
    rate_remote,
    read_scorecards,
    round2,
    write_scorecards,
)

# Printed per-category rows (S_EA, S_VN, S_VQ) -> S of the reference comparison
# table, all 15 method rows plus the 12 ablation-table rows.
TABLE1_ROWS = [
    # add
    (2.60, 3.10, 3.46, 3.05),
    (6.47, 5.70, 6.77, 6.31),
    (6.70, 7.57, 8.41, 7.56),
    (8.54, 7.55, 8.61, 8.23),
    # replace
    (2.10, 3.91, 3.49, 3.17),
    (7.08, 6.21, 6.88, 6.72),
    (4.56, 7.21, 7.96, 6.58),
    (9.43, 8.01, 8.77, 8.74),
    # remove
    (2.44, 3.76, 3.29, 3.16),
    (4.57, 5.43, 5.56, 5.19),
    (7.28, 6.90, 6.82, 7.00),
    # style
    (8.17, 8.21, 7.35, 7.91),
    (4.65, 4.67, 5.17, 4.83),
    (9.20, 9.07, 8.77, 9.01),
    (9.42, 9.19, 8.90, 9.17),
]

TABLE2_ROWS = [
    (8.05, 7.44, 8.59, 8.03), (9.01, 8.01, 8.67, 8.56),
    (6.90, 6.83, 6.91, 6.88), (9.09, 9.10, 8.84, 9.01),
    (8.33, 7.37, 8.01, 7.90), (9.23, 7.94, 8.46, 8.54),
    (7.11, 6.75, 6.70, 6.85), (9.21, 9.08, 8.81, 9.03),
    (8.54, 7.55, 8.61, 8.23), (9.43, 8.01, 8.77, 8.74),
    (7.28, 6.90, 6.82, 7.00), (9.42, 9.19, 8.90, 9.17),
]


def card(value=8.0, task="add", sample_id="0", **overrides):
    scores = {k: value for k in ("sa", "sp", "cp", "an", "sn", "mn", "vf", "ts", "es")}
    scores.update(overrides)
    return ScoreCard(task=task, sample_id=sample_id, **scores)


class TestCategoryScores:
    def test_equal_scores(self):
        cats = category_scores(card(8.0))
        assert cats.s_ea == cats.s_vn == cats.s_vq == pytest.approx(8.0)
        assert cats.s == pytest.approx(8.0)

    def test_zero_subscore_zeroes_category(self):
        cats = category_scores(card(8.0, sa=0.0))
        assert cats.s_ea == 0.0
        assert cats.s_vn == pytest.approx(8.0)

    def test_perfect_scores(self):
        assert category_scores(card(10.0)).s == pytest.approx(10.0)

    def test_scale_consistency(self):
        # doubling all three EA sub-scores doubles the EA category score
        ref = category_scores(card(4.0, sa=2.0, sp=3.0, cp=5.0))
        doubled = category_scores(card(4.0, sa=4.0, sp=6.0, cp=10.0))
        assert doubled.s_ea == pytest.approx(2.0 * ref.s_ea, rel=1e-12)
        assert doubled.s_vn == ref.s_vn

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            card(11.0)
        with pytest.raises(ValidationError):
            card(8.0, ts=-0.5)


class TestOverall:
    @pytest.mark.parametrize("s_ea,s_vn,s_vq,expected", TABLE1_ROWS)
    def test_reference_rows(self, s_ea, s_vn, s_vq, expected):
        assert overall_from_categories(s_ea, s_vn, s_vq) == expected

    @pytest.mark.parametrize("s_ea,s_vn,s_vq,expected", TABLE2_ROWS)
    def test_ablation_rows(self, s_ea, s_vn, s_vq, expected):
        assert overall_from_categories(s_ea, s_vn, s_vq) == expected

    def test_zero(self):
        assert overall_from_categories(0.0, 0.0, 0.0) == 0.0

    def test_rounding_half_away_from_zero(self):
        assert round2(1.005) == 1.01
        assert round2(8.2333333) == 8.23
        assert round2(8.736666) == 8.74

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            overall_from_categories(-1.0, 1.0, 1.0)


class TestAggregate:
    def test_single_card_matches_category_scores(self):
        c = card(7.0, sa=9.0, an=5.0)
        table = aggregate_benchmark([c])
        cats = category_scores(c)
        row = table["add"]
        assert row["s_ea"] == pytest.approx(cats.s_ea)
        assert row["s_vn"] == pytest.approx(cats.s_vn)
        assert row["s"] == pytest.approx(cats.s)

    def test_duplicate_cards_idempotent(self):
        c = card(6.5)
        one = aggregate_benchmark([c])
        two = aggregate_benchmark([c, c])
        assert one["add"]["s"] == two["add"]["s"]
        assert two["add"]["count"] == 2

    def test_permutation_bit_identical(self, rng):
        cards = [
            card(float(np.round(rng.uniform(1, 9), 2)), task=t, sample_id=str(i))
            for i, t in enumerate(["add", "style", "remove", "replace"] * 5)
        ]
        fwd = aggregate_benchmark(cards)
        rev = aggregate_benchmark(list(reversed(cards)))
        assert fwd == rev

    def test_missing_task_absent_not_zero(self):
        table = aggregate_benchmark([card(5.0, task="style")])
        assert "style" in table and "add" not in table

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            aggregate_benchmark([])

    def test_per_sample_geomean_then_average(self):
        # distinguishable from geometric-mean-of-averages
        a = card(8.0, sa=4.0)
        b = card(8.0, sa=9.0)
        table = aggregate_benchmark([a, b])
        per_sample = (category_scores(a).s_ea + category_scores(b).s_ea) / 2
        assert table["add"]["s_ea"] == pytest.approx(per_sample)
        geo_of_avg = ((4.0 + 9.0) / 2 * 8.0 * 8.0) ** (1 / 3)
        assert abs(table["add"]["s_ea"] - geo_of_avg) > 1e-3


def video(values):
    return PixelVideo(np.asarray(values, dtype=np.float32))


class TestProxyMetrics:
    def setup_method(self):
        r = np.random.default_rng(0)
        self.src = video(r.uniform(0.2, 0.8, size=(2, 4, 4, 3)))
        self.mask = np.zeros((2, 4, 4), dtype=np.uint8)
        self.mask[:, :2, :2] = 1

    def test_identity_output(self):
        m = proxy_metrics(self.src, self.src, self.src, self.mask)
        assert m.edit_change == m.background_error == m.gt_compliance == m.flicker == 0.0

    def test_matching_gt(self):
        out = video(np.clip(self.src.values + 0.05, 0, 1))
        m = proxy_metrics(self.src, out, out, self.mask)
        assert m.gt_compliance == 0.0 and m.flicker == 0.0

    def test_uniform_shift_full_mask(self):
        out = video(self.src.values + 0.1)
        m = proxy_metrics(self.src, out, self.src, np.ones((2, 4, 4), dtype=np.uint8))
        assert m.edit_change == pytest.approx(0.1, abs=1e-6)
        assert m.background_error == 0.0

    def test_gt_compliance_zero_iff_match_inside_mask(self):
        out = np.array(self.src.values, copy=True)
        out[:, 2:, 2:] += 0.1  # outside the mask
        m = proxy_metrics(self.src, video(np.clip(out, 0, 1)), self.src, self.mask)
        assert m.gt_compliance == 0.0
        assert m.background_error > 0.0

    def test_gt_compliance_positive_when_gt_differs_inside_mask(self):
        gt = np.array(self.src.values, copy=True)
        gt[:, :2, :2] = np.clip(gt[:, :2, :2] + 0.2, 0, 1)  # inside the mask
        m = proxy_metrics(self.src, self.src, video(gt), self.mask)
        assert m.gt_compliance > 0.0
        assert m.edit_change == 0.0

    def test_shape_and_mask_validation(self):
        with pytest.raises(ShapeError):
            proxy_metrics(self.src, self.src, self.src, np.zeros((1, 4, 4)))
        with pytest.raises(ValidationError):
            proxy_metrics(self.src, self.src, self.src,
                          np.full((2, 4, 4), 0.5))


class TestRater:
    def test_mock_deterministic(self):
        a = MockRater(3).rate("add", "7")
        b = MockRater(3).rate("add", "7")
        c = MockRater(4).rate("add", "7")
        assert a == b
        assert a != c

    def test_missing_field_named(self):
        body = {k: 5.0 for k in ("sa", "sp", "cp", "an", "sn", "mn", "vf", "es")}
        with pytest.raises(RaterSchemaError, match="ts"):
            parse_rater_response(body, "add", "0")

    def test_out_of_range_score(self):
        body = {k: 5.0 for k in ("sa", "sp", "cp", "an", "sn", "mn", "vf", "ts", "es")}
        body["sn"] = 11.0
        with pytest.raises(RaterRangeError):
            parse_rater_response(body, "add", "0")

    def test_rate_remote_with_injected_transport(self):
        def transport(endpoint, payload, timeout):
            assert payload["task"] == "style"
            assert "system_prompt" in payload and "source" in payload
            return {k: 6.0 for k in ("sa", "sp", "cp", "an", "sn", "mn", "vf", "ts", "es")}

        frames = np.zeros((1, 2, 2, 3), dtype=np.float32)
        scorecard = rate_remote("http://rater.local/rate", "style", "9",
                                frames, frames, transport=transport)
        assert scorecard.sa == 6.0 and scorecard.sample_id == "9"

    def test_transport_retries_then_raises(self):
        calls = []

        def failing(endpoint, payload, timeout):
            calls.append(1)
            raise RaterTransportError("nope")

        frames = np.zeros((1, 2, 2, 3), dtype=np.float32)
        with pytest.raises(RaterTransportError):
            rate_remote("http://rater.local", "add", "0", frames, frames,
                        retries=2, transport=failing)
        assert len(calls) == 3  # initial + 2 retries

    def test_schema_error_not_retried(self):
        calls = []

        def bad_schema(endpoint, payload, timeout):
            calls.append(1)
            return {"sa": 1.0}

        frames = np.zeros((1, 2, 2, 3), dtype=np.float32)
        with pytest.raises(RaterSchemaError):
            rate_remote("http://rater.local", "add", "0", frames, frames,
                        retries=5, transport=bad_schema)
        assert len(calls) == 1

    def test_unreachable_endpoint_is_transport_error(self):
        frames = np.zeros((1, 1, 1, 3), dtype=np.float32)
        with pytest.raises(RaterTransportError):
            rate_remote("http://127.0.0.1:9/rate", "add", "0", frames, frames,
                        retries=0, timeout=0.2)

    def test_scorecards_jsonl_roundtrip(self, tmp_path):
        cards = [MockRater(0).rate(t, str(i)) for i, t in enumerate(["add", "style"])]
        path = tmp_path / "cards.jsonl"
        write_scorecards(cards, path)
        assert read_scorecards(path) == cards
