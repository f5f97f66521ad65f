use echohop::cls::{
    build_descriptor, classify, gap_pool, hop_descriptor_len, oversample, spp_pool, train_classifier, ClsConfig,
    FeatureDescriptor, HopMask, Oversample,
};
use echohop::encoder::FeatureMaps;
use echohop::io::manifest::LvefClass;
use echohop::volume::{Dims, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::random_volume;

/// Bin means computed cell by cell with explicit bin membership.
fn spp_oracle(f: &Volume) -> Vec<f64> {
    let d = f.dims();
    let (sh, sw) = (d.h.div_ceil(2), d.w.div_ceil(2));
    let mut out = Vec::new();
    for (by, bx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        for c in 0..d.c {
            let (mut sum, mut n) = (0.0, 0.0);
            for y in 0..d.h {
                for x in 0..d.w {
                    if (y >= sh) as usize == by && (x >= sw) as usize == bx {
                        for t in 0..d.t {
                            sum += f.get(y, x, t, c) as f64;
                            n += 1.0;
                        }
                    }
                }
            }
            out.push(sum / n);
        }
    }
    out
}

#[test]
fn spatial_pyramid_matches_bin_oracle() {
    for (i, dims) in [Dims::new(14, 14, 12, 5), Dims::new(7, 9, 3, 2), Dims::new(2, 2, 1, 1)].into_iter().enumerate() {
        let f = random_volume(dims, i as u64);
        let got = spp_pool(&f).unwrap();
        let want = spp_oracle(&f);
        assert_eq!(got.len(), 4 * dims.c);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn quadrant_constants_pool_exactly() {
    let f = Volume::from_fn(Dims::new(6, 6, 2, 1), |y, x, _, _| [[1.0, 2.0], [3.0, 4.0]][y / 3][x / 3]);
    assert_eq!(spp_pool(&f).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(gap_pool(&f).unwrap(), vec![2.5, 4.0]);
}

#[test]
fn global_pooling_matches_oracle() {
    let f = random_volume(Dims::new(5, 4, 3, 3), 8);
    let got = gap_pool(&f).unwrap();
    for c in 0..3 {
        let vals = f.channel(c);
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let max = vals.iter().fold(f64::MIN, |m, &v| m.max(v as f64));
        assert!((got[c] - mean).abs() <= 1e-9);
        assert_eq!(got[3 + c], max);
    }
}

#[test]
fn descriptor_layout_and_lengths() {
    let channels = [3, 5, 7, 11];
    let maps = FeatureMaps {
        levels: (0..4)
            .map(|l| random_volume(Dims::new(16 >> l, 16 >> l, 2, channels[l]), l as u64))
            .collect(),
    };
    let d = build_descriptor(&maps, &channels).unwrap();
    assert_eq!(d.hop_lens(), [12, 10, 14, 44]);
    for h in 0..4 {
        assert_eq!(d.hops[h].len(), hop_descriptor_len(h, channels[h]));
    }
    assert_eq!(d.len(), 80);
    assert_eq!(d.masked("34".parse().unwrap()).len(), 58);
    assert!(build_descriptor(&maps, &[3, 5, 7, 12]).is_err());
}

#[test]
fn hop_subsets_parse_and_print() {
    let subsets = HopMask::ablation_subsets();
    let names: Vec<String> = subsets.iter().map(|m| m.to_string()).collect();
    assert_eq!(names, ["1234", "234", "34", "4", "123", "1", "12"]);
    for bad in ["", "5", "11", "a"] {
        assert!(bad.parse::<HopMask>().is_err(), "{bad}");
    }
}

fn labelled_descriptors(n: usize, seed: u64) -> (Vec<FeatureDescriptor>, Vec<LvefClass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<LvefClass> = (0..n).map(|i| LvefClass::ALL[i % 3]).collect();
    let descs = labels
        .iter()
        .map(|l| {
            let centre = l.index() as f64;
            let mut v = |len: usize| (0..len).map(|_| centre + rng.gen_range(-0.3..0.3)).collect::<Vec<f64>>();
            FeatureDescriptor {
                hops: [v(4), v(2), v(2), v(4)],
            }
        })
        .collect();
    (descs, labels)
}

#[test]
fn separable_descriptors_are_classified() {
    let (descs, labels) = labelled_descriptors(60, 1);
    let cfg = ClsConfig::default();
    let m = train_classifier(&descs, &labels, [1; 4], &cfg).unwrap();
    let (test, truth) = labelled_descriptors(30, 2);
    for (d, l) in test.iter().zip(&truth) {
        let (c, p) = classify(&m, d).unwrap();
        assert_eq!(c, *l);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // A duplicated point classifies like its original.
    assert_eq!(classify(&m, &descs[0]).unwrap(), classify(&m, &descs[0].clone()).unwrap());
}

#[test]
fn missing_class_asks_for_oversampling() {
    let (descs, labels) = labelled_descriptors(30, 3);
    let keep: Vec<usize> = (0..30).filter(|&i| labels[i] != LvefClass::Reduced).collect();
    let d: Vec<_> = keep.iter().map(|&i| descs[i].clone()).collect();
    let l: Vec<_> = keep.iter().map(|&i| labels[i]).collect();
    let e = train_classifier(&d, &l, [1; 4], &ClsConfig::default()).unwrap_err();
    assert!(e.to_string().contains("oversample"), "{e}");
}

#[test]
fn balancing_duplicates_the_minority() {
    let labels: Vec<LvefClass> = [0, 0, 0, 0, 1, 2, 2, 2].iter().map(|&i| LvefClass::ALL[i]).collect();
    let targets = Oversample::Balance.targets([4, 1, 3]);
    assert_eq!(targets, [4, 4, 4]);
    let (order, record) = oversample(&labels, targets, 5).unwrap();
    assert_eq!(order.len(), 12);
    assert_eq!(record.final_counts, [4, 4, 4]);
    assert_eq!(&order[..8], &[0, 1, 2, 3, 4, 5, 6, 7]);
    let again = oversample(&labels, targets, 5).unwrap();
    assert_eq!(again.0, order);
    assert!(Oversample::None.targets([4, 1, 3]) == [4, 1, 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn global_pooling_ignores_frame_order(seed in any::<u64>(), shift in 1usize..5) {
        let f = random_volume(Dims::new(4, 3, 5, 2), seed);
        let g = Volume::from_fn(f.dims(), |h, w, t, c| f.get(h, w, (t + shift) % 5, c));
        let (a, b) = (gap_pool(&f).unwrap(), gap_pool(&g).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn pyramid_of_constant_map_is_constant(v in -5.0f32..5.0, h in 2usize..9, w in 2usize..9) {
        let f = Volume::filled(Dims::new(h, w, 2, 3), v);
        prop_assert!(spp_pool(&f).unwrap().iter().all(|&x| (x - v as f64).abs() <= 1e-6));
    }
}
