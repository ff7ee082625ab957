use cot_progress::annotate::{cosine_rho, insert_annotations, MaskingSchedule, Segmentation};
use cot_progress::label::{bucketize, realized_progress};
use cot_progress::marker::{match_at, Match, SpanValue};
use cot_progress::metrics::{
    dispersion_curve, mad, mad_mapd, mapd, progress_mae, DispersionKey, MarkerPoint, MarkerSeries, RolloutGroup,
};
use cot_progress::probe::{HiddenStateMatrix, ProbeModel, ProbeSpec};
use cot_progress::stream::{coalesce, parse_all, reconstruct, StreamEvent, StreamParser};
use cot_progress::trace::{extract_annotations, parse_trace_line};
use cot_progress::ReasoningTrace;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn group() -> impl Strategy<Value = RolloutGroup> {
    (1u64..5_000, prop::collection::vec(0u64..50_000, 2..10)).prop_map(|(k, c)| RolloutGroup {
        trace_id: "t".into(),
        prefix_len: k,
        continuation_lens: c,
    })
}

fn series() -> impl Strategy<Value = MarkerSeries> {
    prop::collection::vec((1u64..300, 0.0f64..=1.0, 0.0f64..=1.0), 1..8).prop_map(|pts| {
        let mut k = 0;
        let markers = pts
            .into_iter()
            .map(|(step, predicted, realized)| {
                k += step;
                MarkerPoint {
                    prefix_len: k,
                    predicted,
                    realized,
                }
            })
            .collect();
        MarkerSeries::new("t", markers).unwrap()
    })
}

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9=+.,]{1,6}"
}

fn paragraphs() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::collection::vec(word(), 1..20), 1..10).prop_map(|ps| {
        ps.into_iter()
            .map(|words| words.join(" ") + "\n\n")
            .collect()
    })
}

fn stream_bytes() -> impl Strategy<Value = Vec<u8>> {
    let piece = prop_oneof![
        Just(b"<progressbar>".to_vec()),
        Just(b"</progressbar>".to_vec()),
        Just(b"<progressbar>63</progressbar>".to_vec()),
        Just(b"<progressbar>101</progressbar>".to_vec()),
        Just(b"<progr".to_vec()),
        prop::collection::vec(any::<u8>(), 0..4),
        "[0-9 <>/a-z]{0,5}".prop_map(String::into_bytes),
    ];
    prop::collection::vec(piece, 0..12).prop_map(|v| v.concat())
}

proptest! {
    #[test]
    fn trace_json_round_trip(id in "[a-z0-9-]{1,10}", q in ".{0,20}", words in prop::collection::vec(word(), 1..30)) {
        let reasoning = words.join(" ");
        let t = ReasoningTrace {
            id,
            question: q,
            token_count: words.len() as u64,
            reasoning,
            answer: String::new(),
            model_family: "m".into(),
            task: "t".into(),
        };
        prop_assert_eq!(parse_trace_line(&t.to_json_line()).unwrap(), t);
    }

    #[test]
    fn pphs_round_trip(nq in 0usize..3, m in 1usize..6, d in 1usize..5, seed in any::<u32>()) {
        let v = |i: usize| ((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 / u32::MAX as f32;
        let q = Array2::from_shape_fn((nq, d), |(i, j)| v(i * d + j));
        let t = Array2::from_shape_fn((m, d), |(i, j)| -v(1000 + i * d + j));
        let hs = HiddenStateMatrix::new(q, t).unwrap();
        let mut buf = Vec::new();
        hs.write_pphs(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 20 + 4 * (nq + m) * d);
        prop_assert_eq!(HiddenStateMatrix::read_pphs(&buf[..]).unwrap(), hs);
    }

    #[test]
    fn probe_model_round_trip(q in 2u32..6, d in 1usize..6, vals in prop::collection::vec(-5.0f64..5.0, 36)) {
        let mut model = ProbeModel::zeros(ProbeSpec { buckets: q, ..ProbeSpec::default() }, d);
        model.weights = Array2::from_shape_fn((q as usize, d), |(i, j)| vals[(i * d + j) % vals.len()]);
        model.bias = Array1::from_shape_fn(q as usize, |i| vals[i]);
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        prop_assert_eq!(ProbeModel::read_from(&buf[..]).unwrap(), model);
    }

    #[test]
    fn bucket_scale_invariant(k in 1u64..10_000, extra in 0u64..10_000, c in 1u64..1_000, q in 2u32..40) {
        let m = k + extra;
        prop_assert_eq!(bucketize(k, m, q).unwrap(), bucketize(c * k, c * m, q).unwrap());
    }

    #[test]
    fn bucket_monotone_in_prefix(k in 1u64..10_000, extra in 1u64..10_000, q in 2u32..40) {
        let m = k + extra;
        prop_assert!(bucketize(k, m, q).unwrap().index <= bucketize(k + 1, m, q).unwrap().index);
        prop_assert_eq!(bucketize(m, m, q).unwrap().index, q);
    }

    #[test]
    fn realized_progress_in_unit_interval(k in 0u64..10_000, extra in 0u64..10_000) {
        let g = realized_progress(k, k + extra + 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn cosine_schedule_monotone(total in 2u64..500, rho_max in 0.0f64..=1.0) {
        let s = MaskingSchedule::new(total, rho_max).unwrap();
        let mut prev = 0.0;
        for t in 0..total {
            let r = cosine_rho(t, &s).unwrap();
            prop_assert!(r + 1e-15 >= prev && r <= rho_max + 1e-15);
            prev = r;
        }
        prop_assert!((cosine_rho(total - 1, &s).unwrap() - rho_max).abs() < 1e-12);
    }

    #[test]
    fn annotations_round_trip(parts in paragraphs()) {
        let seg = Segmentation::new(parts).unwrap();
        let a = insert_annotations(&seg);
        let e = extract_annotations(&a.text).unwrap();
        prop_assert_eq!(&e.annotations, &a.annotations);
        prop_assert_eq!(e.clean_text, seg.text());
        prop_assert_eq!(a.annotations.last().unwrap().value, 100);
        prop_assert!(a.annotations.windows(2).all(|w| w[0].value <= w[1].value));
    }

    #[test]
    fn mapd_dominates_mad(groups in prop::collection::vec(group(), 1..8)) {
        let (m, p) = mad_mapd(&groups).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert!(p + 1e-15 >= m);
    }

    #[test]
    fn dispersion_order_independent(mut groups in prop::collection::vec(group(), 1..8)) {
        let a = (mad(&groups).unwrap(), mapd(&groups).unwrap());
        groups.reverse();
        for g in &mut groups {
            g.continuation_lens.reverse();
        }
        prop_assert_eq!(a, (mad(&groups).unwrap(), mapd(&groups).unwrap()));
    }

    #[test]
    fn one_bin_curve_is_global(groups in prop::collection::vec(group(), 1..8)) {
        let (m, p) = mad_mapd(&groups).unwrap();
        for key in [DispersionKey::Position, DispersionKey::PrefixLength] {
            let bins = dispersion_curve(&groups, 1, key).unwrap();
            prop_assert_eq!(bins.len(), 1);
            prop_assert_eq!((bins[0].mad, bins[0].mapd), (m, p));
        }
    }

    #[test]
    fn progress_mae_bounded_and_permutation_invariant(mut s in prop::collection::vec(series(), 1..6)) {
        let a = progress_mae(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        s.reverse();
        prop_assert_eq!(a, progress_mae(&s).unwrap());
    }

    #[test]
    fn stream_chunking_does_not_matter(input in stream_bytes(), cuts in prop::collection::vec(1usize..8, 0..40)) {
        let whole = coalesce(parse_all(&input));
        let mut p = StreamParser::new();
        let mut events = Vec::new();
        let mut rest = &input[..];
        let mut cuts = cuts.into_iter().cycle();
        while !rest.is_empty() {
            let n = cuts.next().unwrap_or(rest.len()).min(rest.len());
            events.extend(p.feed(&rest[..n]).unwrap());
            rest = &rest[n..];
        }
        events.extend(p.finish());
        let events = coalesce(events);
        prop_assert_eq!(&events, &whole);
        prop_assert_eq!(reconstruct(&events), input);
        prop_assert_eq!(events.last(), Some(&StreamEvent::End));
        // a well-formed in-range span never survives inside text
        for e in &events {
            if let StreamEvent::Text(t) = e {
                for i in 0..t.len() {
                    let m = match_at(t, i);
                    prop_assert!(!matches!(m, Match::Span { value: SpanValue::Valid(_), .. }), "{:?}", t);
                }
            }
        }
    }
}
