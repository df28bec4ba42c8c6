use std::path::Path;

use effecg::data::{format_multilead, make_batches, parse_multilead, split_indices, Dataset, LabelMode, SplitSpec};
use effecg::signal::{EcgRecord, Gender};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = EcgRecord> {
    (1usize..4, 1usize..40).prop_flat_map(|(leads, n)| {
        (
            prop::collection::vec(prop::collection::vec(-1e4..1e4f64, n), leads),
            prop::sample::select(vec![125.0, 250.0, 360.0, 500.0]),
            prop::option::of(0u32..110),
            prop::option::of(any::<bool>()),
            prop::collection::btree_set(0usize..9, 0..4),
        )
            .prop_map(|(leads, fs, age, g, labels)| {
                let gender = g.map(|m| if m { Gender::Male } else { Gender::Female });
                EcgRecord::new(leads, fs, age, gender, labels.into_iter().collect()).unwrap()
            })
    })
}

fn single_label(n: usize, k: usize) -> Dataset {
    let records = (0..n)
        .map(|i| EcgRecord::new(vec![vec![0.0, 1.0]], 125.0, None, None, vec![(i * 7 + i / 3) % k]).unwrap())
        .collect();
    Dataset::new(records, k, LabelMode::Single, "mem").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn multilead_text_round_trip(r in record()) {
        let back = parse_multilead(&format_multilead(&r), Path::new("mem")).unwrap();
        prop_assert_eq!(back.sample_rate, r.sample_rate);
        prop_assert_eq!(back.age, r.age);
        prop_assert_eq!(back.gender, r.gender);
        prop_assert_eq!(&back.labels, &r.labels);
        prop_assert_eq!(back.leads.len(), r.leads.len());
        for (a, b) in back.leads.iter().zip(&r.leads) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9));
        }
    }

    #[test]
    fn split_is_a_partition(
        n in 1usize..120,
        k in 1usize..5,
        train in 0.0..1.0f64,
        val_share in 0.0..1.0f64,
        stratify in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let val = (1.0 - train) * val_share;
        let spec = SplitSpec { train, val, test: 1.0 - train - val, seed, stratify };
        let d = single_label(n, k);
        let [a, b, c] = split_indices(&d, &spec).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_each_record_once(n in 0usize..200, size in 1usize..40, seed in any::<u64>()) {
        let batches = make_batches(n, size, seed).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= size));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
