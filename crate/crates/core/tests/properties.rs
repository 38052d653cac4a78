use proptest::prelude::*;
use qttie::arith::{tt_add, tt_dot, tt_matmat_unrounded, tt_matvec_dense, tt_matvec_unrounded};
use qttie::compress::{tt_round, tt_svd, CompressionConfig};
use qttie::tensor::io;
use qttie::{DenseTensor, TTOperator, TTVector, TensorTrain, TensorizationScheme};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn shape() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..=5)
        .prop_flat_map(|d| (prop::collection::vec(2usize..=3, d), prop::collection::vec(1usize..=3, d - 1)))
        .prop_map(|(modes, inner)| {
            let mut ranks = vec![1];
            ranks.extend(inner);
            ranks.push(1);
            (modes, ranks)
        })
}

fn random_train(modes: &[usize], ranks: &[usize], seed: u64) -> TensorTrain {
    TensorTrain::random(modes, ranks, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_operator(modes: &[usize], ranks: &[usize], seed: u64) -> TTOperator {
    let paired: Vec<usize> = modes.iter().map(|m| m * m).collect();
    let scheme = TensorizationScheme::from_modes(modes.to_vec()).unwrap();
    TTOperator::new(random_train(&paired, ranks, seed), scheme).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tt_svd_meets_its_bound((modes, _) in shape(), seed in any::<u64>(), exp in 2i32..=10) {
        let eps = 10f64.powi(-exp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = DenseTensor::from_fn(modes.clone(), |_| rand::Rng::random_range(&mut rng, -1.0..1.0)).unwrap();
        let tt = tt_svd(&t, &CompressionConfig::with_eps(eps)).unwrap();
        prop_assert!(rel(tt.to_dense().unwrap().data(), t.data()) <= eps);
    }

    #[test]
    fn rounding_error_and_ranks((modes, ranks) in shape(), seed in any::<u64>(), exp in 1i32..=8) {
        let eps = 10f64.powi(-exp);
        let x = random_train(&modes, &ranks, seed);
        let y = tt_add(&x, &random_train(&modes, &ranks, seed ^ 1)).unwrap();
        let r = tt_round(&y, eps).unwrap();
        let (full, approx) = (y.to_dense().unwrap(), r.to_dense().unwrap());
        prop_assert!(rel(approx.data(), full.data()) <= eps * (1.0 + 1e-10));
        for (a, b) in r.ranks().iter().zip(y.ranks()) {
            prop_assert!(*a <= b);
        }
    }

    #[test]
    fn rank_product_law((modes, ranks) in shape(), seed in any::<u64>()) {
        let a = random_operator(&modes, &ranks, seed);
        let b = random_operator(&modes, &ranks, seed.wrapping_add(1));
        let v = TTVector::new(random_train(&modes, &ranks, seed.wrapping_add(2)));
        let sq: Vec<usize> = ranks.iter().map(|r| r * r).collect();
        prop_assert_eq!(tt_matvec_unrounded(&a, &v).unwrap().ranks(), sq.clone());
        prop_assert_eq!(tt_matmat_unrounded(&a, &b).unwrap().ranks(), sq);
    }

    #[test]
    fn dense_apply_matches_matrix((modes, ranks) in shape(), seed in any::<u64>()) {
        let a = random_operator(&modes, &ranks, seed);
        let m = a.to_matrix().unwrap();
        let x: Vec<f64> = (0..a.cols()).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let want: Vec<f64> = (0..a.rows()).map(|i| (0..a.cols()).map(|j| m[(i, j)] * x[j]).sum()).collect();
        let got = tt_matvec_dense(&a, &x).unwrap();
        prop_assert!(rel(&got, &want) < 1e-12);
    }

    #[test]
    fn compressed_apply_matches_dense_apply((modes, ranks) in shape(), seed in any::<u64>()) {
        let a = random_operator(&modes, &ranks, seed);
        let v = TTVector::new(random_train(&modes, &ranks, seed ^ 7));
        let got = tt_matvec_unrounded(&a, &v).unwrap().to_vec().unwrap();
        let want = tt_matvec_dense(&a, &v.to_vec().unwrap()).unwrap();
        prop_assert!(rel(&got, &want) < 1e-12);
    }

    #[test]
    fn dot_matches_dense((modes, ranks) in shape(), seed in any::<u64>()) {
        let x = TTVector::new(random_train(&modes, &ranks, seed));
        let y = TTVector::new(random_train(&modes, &ranks, seed ^ 3));
        let (dx, dy) = (x.to_vec().unwrap(), y.to_vec().unwrap());
        let want: f64 = dx.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let got = tt_dot(&x, &y).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn ttb1_round_trip_is_bit_exact((modes, ranks) in shape(), seed in any::<u64>()) {
        let a = random_operator(&modes, &ranks, seed);
        let mut buf = Vec::new();
        io::write_operator(&mut buf, &a).unwrap();
        let back = io::decode(&buf).unwrap().into_operator().unwrap();
        prop_assert_eq!(back.train(), a.train());
        let v = TTVector::new(random_train(&modes, &ranks, seed));
        let mut buf = Vec::new();
        io::write_vector(&mut buf, &v).unwrap();
        prop_assert_eq!(io::decode(&buf).unwrap().into_vector().unwrap(), v);
    }

    #[test]
    fn morton_is_a_bijection(dims in 1usize..=3, bits in 1usize..=3, leaf in 1usize..=2) {
        prop_assume!(leaf <= dims * bits);
        let s = TensorizationScheme::morton_with_leaf(dims, bits, leaf).unwrap();
        for lin in 0..s.len() {
            let c = s.index_to_coords(lin).unwrap();
            prop_assert_eq!(s.coords_to_index(&c).unwrap(), lin);
            let multi = s.index_to_multi(lin).unwrap();
            prop_assert_eq!(s.multi_to_index(&multi).unwrap(), lin);
        }
    }
}
