use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsmcd::nn::{Init, ParamStore};
use stsmcd::scan2d::{cross_scan_expand, cross_scan_merge, Direction, DirectionalLayout, Ss2d};
use stsmcd::ssm::Discretization;
use stsmcd::{Graph, Tensor};

#[test]
fn two_by_two_orders() {
    let map = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let seqs = cross_scan_expand(&map).unwrap();
    assert_eq!(seqs[0].data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(seqs[1].data(), &[4.0, 3.0, 2.0, 1.0]);
    assert_eq!(seqs[2].data(), &[1.0, 3.0, 2.0, 4.0]);
    assert_eq!(seqs[3].data(), &[4.0, 2.0, 3.0, 1.0]);
}

#[test]
fn layouts_are_permutations_with_inverses() {
    for (h, w) in [(1, 1), (1, 5), (4, 1), (3, 7), (6, 6)] {
        for l in DirectionalLayout::all(h, w) {
            let mut seen = l.forward.to_vec();
            seen.sort_unstable();
            assert_eq!(seen, (0..h * w).collect::<Vec<_>>());
            for (k, &i) in l.forward.iter().enumerate() {
                assert_eq!(l.inverse[i], k);
            }
        }
    }
}

#[test]
fn merge_of_expand_is_four_times_the_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = Tensor::uniform(&[5, 3, 2], -1.0, 1.0, &mut rng);
    let merged = cross_scan_merge(&cross_scan_expand(&map).unwrap(), 5, 3).unwrap();
    for (m, x) in merged.data().iter().zip(map.data()) {
        assert!((m - 4.0 * x).abs() < 1e-15);
    }
}

#[test]
fn half_turn_rotation_swaps_reversed_pairs() {
    let (h, w) = (3, 4);
    let map = Tensor::from_fn(&[h, w, 1], |i| i as f64);
    let rotated = Tensor::from_fn(&[h, w, 1], |i| (h * w - 1 - i) as f64);
    let a = cross_scan_expand(&map).unwrap();
    let b = cross_scan_expand(&rotated).unwrap();
    for (k, d) in Direction::ALL.iter().enumerate() {
        let j = Direction::ALL.iter().position(|x| *x == d.rotated_half_turn()).unwrap();
        assert_eq!(a[k].data(), b[j].data(), "{d:?}");
    }
}

#[test]
fn merge_rejects_mismatched_sequences() {
    let s = Tensor::zeros(&[6, 2]);
    let seqs = [s.clone(), s.clone(), s.clone(), Tensor::zeros(&[6, 3])];
    assert!(cross_scan_merge(&seqs, 2, 3).is_err());
    assert!(cross_scan_merge(&[s.clone(), s.clone(), s.clone(), s], 3, 3).is_err());
}

#[test]
fn ss2d_keeps_shape_for_both_discretizations() {
    for mode in [Discretization::EulerB, Discretization::ExactZoh] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ss2d = Ss2d::new(&mut Init::new(&mut store, &mut rng), "ss2d", 6, 3, mode, true);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::uniform(&[4, 8, 6], -1.0, 1.0, &mut rng));
        let y = ss2d.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[4, 8, 6]);
        assert!(g.value(y).data().iter().all(|v| v.is_finite()));
    }
}
