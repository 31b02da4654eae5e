use proptest::prelude::*;

use tan_gcd::dataset::{load_feature_file, read_feature_file, save_feature_file, write_feature_file, Instance, Split};
use tan_gcd::encoder::{EncoderHead, HeadConfig};
use tan_gcd::synthetic::{load_truth, make_synthetic, save_truth, SyntheticConfig};
use tan_gcd::Dataset;

fn split() -> impl Strategy<Value = Split> {
    prop_oneof![Just(Split::Labeled), Just(Split::Unlabeled), Just(Split::Test)]
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3f64..1e3,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..6).prop_flat_map(|dim| {
        prop::collection::vec(
            ("[A-Za-z0-9_.-]{1,10}", split(), 0u32..50, prop::collection::vec(finite(), dim)),
            0..20,
        )
        .prop_map(move |rows| {
            let instances = rows
                .into_iter()
                .map(|(id, split, gt_label, embedding)| Instance {
                    id,
                    embedding,
                    split,
                    gt_label,
                })
                .collect();
            Dataset::new(dim, instances).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn feature_file_round_trips(ds in dataset()) {
        let mut buf = Vec::new();
        write_feature_file(&ds, &mut buf).unwrap();
        let back = read_feature_file("mem.tsv".as_ref(), buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &ds);
        for (a, b) in back.instances().iter().zip(ds.instances()) {
            for (x, y) in a.embedding.iter().zip(&b.embedding) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn known_categories_follow_labeled_rows(ds in dataset()) {
        let expect: std::collections::BTreeSet<u32> = ds
            .instances()
            .iter()
            .filter(|i| i.split == Split::Labeled)
            .map(|i| i.gt_label)
            .collect();
        prop_assert_eq!(ds.known_categories(), &expect);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 0..3)) {
        let cfg = HeadConfig {
            input_dim: 3,
            hidden,
            output_dim: 4,
            n_classes: 5,
            dropout: 0.25,
            input_noise: 0.0,
        };
        let head = EncoderHead::new(&cfg, seed).unwrap();
        let back = EncoderHead::from_json(&head.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.tensors(), head.tensors());
        prop_assert_eq!(back.dropout, head.dropout);
        let x = [0.3, -1.2, 2.0];
        prop_assert_eq!(back.embed(&x).unwrap(), head.embed(&x).unwrap());
    }
}

#[test]
fn synthetic_data_and_truth_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, truth) = make_synthetic(&SyntheticConfig::acceptance(3)).unwrap();
    let data = dir.path().join("data.tsv");
    let side = dir.path().join("data.truth.tsv");
    save_feature_file(&ds, &data).unwrap();
    save_truth(&truth, &ds, &side).unwrap();
    assert_eq!(load_feature_file(&data).unwrap(), ds);
    let t = load_truth(&side).unwrap();
    assert_eq!((t.ids.clone(), t.vectors.clone()), (truth.ids, truth.vectors));
}

#[test]
fn header_and_comments() {
    let text = "#gcd-features\tdim=2\n\n# note\na\ttest\t3\t1.000000000e0\t-2.5e-1\n";
    let ds = read_feature_file("t.tsv".as_ref(), text.as_bytes()).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.instances()[0].embedding, vec![1.0, -0.25]);
    for bad in [
        "",
        "#features\tdim=2\n",
        "#gcd-features\tdim=0\n",
        "#gcd-features\tdim=2\na\ttest\t3\t1.0\n",
        "#gcd-features\tdim=1\na\tvalid\t3\t1.0\n",
        "#gcd-features\tdim=1\na\ttest\tx\t1.0\n",
        "#gcd-features\tdim=1\na\ttest\t1\tnan\n",
    ] {
        assert!(read_feature_file("t.tsv".as_ref(), bad.as_bytes()).is_err(), "{bad:?}");
    }
}

#[test]
fn written_floats_keep_enough_digits() {
    let ds = Dataset::new(
        1,
        vec![Instance {
            id: "x".into(),
            embedding: vec![std::f64::consts::PI],
            split: Split::Test,
            gt_label: 0,
        }],
    )
    .unwrap();
    let mut buf = Vec::new();
    write_feature_file(&ds, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let field = text.lines().nth(1).unwrap().split('\t').nth(3).unwrap();
    let mantissa = field.split('e').next().unwrap().replace(['.', '-'], "");
    assert!(mantissa.len() >= 9, "{field}");
}
